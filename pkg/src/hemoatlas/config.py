"""Simulation configuration: one schema drives parsing, validation and help text.

Config files are INI documents; key ``section.name`` lives under ``[section]``
as ``name = value``.  Every key has a unit and a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    """Invalid configuration; the message names the violated invariant."""


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _vec3(text: str):
    parts = [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _point_or_auto(text: str):
    return "auto" if str(text).strip().lower() == "auto" else _vec3(text)


def _float_or_auto(text: str):
    return "auto" if str(text).strip().lower() == "auto" else float(text)


def _points(text: str):
    text = str(text).strip()
    if not text:
        return ()
    return tuple(_vec3(p) for p in text.split(";") if p.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = str(text).strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t

    parse.options = options
    return parse


def _str(text: str) -> str:
    return str(text).strip()


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: str
    unit: str
    help: str


SCHEMA: tuple[Key, ...] = (
    # mesh source
    Key("mesh.source", _choice("synthetic", "file"), "synthetic", "-", "where the mesh comes from"),
    Key("mesh.path", _str, "", "path", "mesh file (mesh.source = file)"),
    Key("mesh.compartments", _str, "", "path", "compartment table override file (INI)"),
    Key("mesh.kind", _choice("straight", "y"), "y", "-", "synthetic vessel shape"),
    Key("mesh.radius", float, "2e-3", "m", "synthetic vessel radius"),
    Key("mesh.length", float, "12e-3", "m", "synthetic vessel length (trunk plus one branch for 'y')"),
    Key("mesh.angle", float, "60", "deg", "bifurcation angle"),
    Key("mesh.box", _vec3, "14e-3,14e-3,18e-3", "m", "tissue box edge lengths x,y,z"),
    Key("mesh.h", float, "1e-3", "m", "target edge length"),
    Key("mesh.tissue_label", _str, "Grey matter", "-", "compartment of the synthetic tissue box"),
    # arterial flow
    Key("flow.rho", float, "1050", "kg/m^3", "blood density"),
    Key("flow.mu", float, "4e-3", "Pa s", "reference blood viscosity"),
    Key("flow.total_flow", float, "750", "ml/min", "total cerebral blood flow"),
    Key("flow.pressure", float, "87", "mmHg", "mean arterial pressure"),
    Key("flow.arteriole_radius", float, "5e-6", "m", "arteriole radius"),
    Key("flow.beta_dist", float, "0.2", "-", "vessel distension factor"),
    Key("flow.volume", float, "1e-4", "m^3", "overall volume of changes"),
    Key("flow.gravity", _vec3, "0,0,-9.81", "m/s^2", "gravitational acceleration"),
    Key("flow.eps_leray", float, "0.03", "-", "Leray filter length in units of the mean edge length"),
    Key("flow.eps_visc", float, "0.01", "-", "viscosity smoothing length in units of the mean edge length"),
    Key("flow.boundary_coeff", _choice("zeta_lambda", "wave"), "zeta_lambda", "-", "weight of the pressure boundary operator"),
    Key("flow.velocity_scheme", _choice("semi-implicit", "explicit"), "semi-implicit", "-", "velocity update: literal explicit recursion or implicit convection and viscosity"),
    Key("flow.gravity_mode", _choice("hydrostatic", "body_force"), "hydrostatic", "-", "gravity balanced by a hydrostatic head or applied as a body force"),
    # viscosity
    Key("viscosity.mu0", float, "56e-3", "Pa s", "zero-shear viscosity"),
    Key("viscosity.mu_inf", float, "3.45e-3", "Pa s", "infinite-shear viscosity"),
    Key("viscosity.relaxation", float, "1.902", "s", "Carreau-Yasuda relaxation time"),
    Key("viscosity.n", float, "0.22", "-", "power-law index"),
    Key("viscosity.a", float, "1.25", "-", "transition parameter"),
    # pulse
    Key("pulse.bpm", float, "60", "1/min", "heart rate; cycle length is 60/bpm"),
    Key("pulse.pulse_pressure", float, "50", "mmHg", "systolic minus diastolic pressure"),
    Key("pulse.weights", _vec3, "0.50,0.30,0.25", "-", "percussion, tidal, dicrotic weights"),
    Key("pulse.durations", _vec3, "0.55,0.55,0.60", "cycle", "component durations"),
    Key("pulse.starts", _vec3, "0.05,0.20,0.38", "cycle", "component start phases"),
    Key("pulse.sphere1_center", _point_or_auto, "auto", "m", "first support sphere centre ('auto': centroid of the artery wall)"),
    Key("pulse.sphere1_radius", float, "10e-3", "m", "first support sphere radius"),
    Key("pulse.sphere2_center", _point_or_auto, "auto", "m", "second support sphere centre ('auto': lowest wall node)"),
    Key("pulse.sphere2_radius", float, "3e-3", "m", "second support sphere radius"),
    # microcirculation
    Key("micro.theta", float, "0.7", "-", "pressure-decay fraction"),
    Key("micro.arteriole_length", float, "0.4e-3", "m", "arteriole length"),
    Key("micro.kappa", _float_or_auto, "auto", "1/s", "source scaling ('auto': calibrated)"),
    Key("micro.epsilon_variant", _choice("printed", "sphere"), "printed", "-", "absorption amplitude constant"),
    Key("micro.mass_lumping", _bool, "true", "-", "row-sum lumping of the mass and absorption matrices"),
    # conductivity
    Key("archie.beta", float, "1.6666666666666667", "-", "cementation exponent"),
    Key("archie.sigma_fluid", float, "0.70", "S/m", "blood conductivity"),
    Key("archie.check_range", _bool, "true", "-", "require the cementation exponent in [3/2, 5/3]"),
    # time grid
    Key("time.dt", float, "2e-3", "s", "time step"),
    Key("time.total", float, "6", "s", "simulated time"),
    Key("time.burn_in", float, "3", "s", "discarded initial interval"),
    Key("time.snapshots", int, "300", "-", "number of recorded snapshots after burn-in"),
    # solver and output
    Key("solver.rtol", float, "1e-10", "-", "relative residual tolerance of linear solves"),
    Key("output.directory", _str, "output", "path", "output directory"),
    Key("output.probes", _points, "", "m", "probe points 'x,y,z; x,y,z'"),
    Key("output.vtk_snapshots", _bool, "false", "-", "write one VTK file per snapshot"),
)

KEYS = {k.name: k for k in SCHEMA}


def help_text() -> str:
    lines = ["configuration keys (section.name = default [unit]):"]
    for k in SCHEMA:
        lines.append(f"  {k.name} = {k.default} [{k.unit}]  {k.help}")
    return "\n".join(lines)


def default_text() -> str:
    """A complete config file with every default."""
    out, section = [], None
    for k in SCHEMA:
        sec, name = k.name.split(".", 1)
        if sec != section:
            out.append(f"\n[{sec}]" if out else f"[{sec}]")
            section = sec
        out.append(f"# {k.help} [{k.unit}]")
        out.append(f"{name} = {k.default}")
    return "\n".join(out) + "\n"


class SimulationConfig:
    """Parsed and validated configuration values, addressed as ``cfg["section.name"]``."""

    def __init__(self, raw: dict[str, str] | None = None, base_dir: Path | None = None):
        self.raw = {k.name: k.default for k in SCHEMA}
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        for name, value in (raw or {}).items():
            self._set_raw(name, value)
        self.values = {}
        for k in SCHEMA:
            try:
                self.values[k.name] = k.parse(self.raw[k.name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{k.name}: {exc}") from None
        self.validate()

    def _set_raw(self, name, value):
        if name not in KEYS:
            raise ConfigError(f"unknown config key {name!r}")
        self.raw[name] = str(value)

    @classmethod
    def load(cls, path=None, overrides: list[str] | dict | None = None) -> "SimulationConfig":
        raw = {}
        base = None
        if path:
            path = Path(path)
            parser = configparser.ConfigParser(interpolation=None)
            try:
                if not parser.read(path):
                    raise ConfigError(f"config file not found: {path}")
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from None
            for sec in parser.sections():
                for name, value in parser[sec].items():
                    raw[f"{sec}.{name}"] = value
            base = path.parent
        if isinstance(overrides, dict):
            raw.update({k: str(v) for k, v in overrides.items()})
        else:
            for item in overrides or []:
                if "=" not in item:
                    raise ConfigError(f"override {item!r} is not of the form key=value")
                k, v = item.split("=", 1)
                raw[k.strip()] = v.strip()
        return cls(raw, base)

    def with_overrides(self, **kw) -> "SimulationConfig":
        raw = dict(self.raw)
        raw.update({k.replace("__", "."): str(v) for k, v in kw.items()})
        return SimulationConfig(raw, self.base_dir)

    def __getitem__(self, name):
        return self.values[name]

    def path(self, name) -> Path | None:
        v = self.values[name]
        if not v:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self):
        v = self.values
        positive = [
            "mesh.radius", "mesh.length", "mesh.h", "flow.rho", "flow.mu", "flow.total_flow",
            "flow.pressure", "flow.arteriole_radius", "flow.beta_dist", "flow.volume",
            "viscosity.relaxation", "viscosity.a", "pulse.bpm", "pulse.sphere1_radius",
            "pulse.sphere2_radius", "micro.arteriole_length", "archie.sigma_fluid", "time.dt",
            "solver.rtol",
        ]
        for name in positive:
            if not v[name] > 0:
                raise ConfigError(f"{name} must be > 0 (got {v[name]})")
        for name in ("flow.eps_leray", "flow.eps_visc", "pulse.pulse_pressure", "time.burn_in"):
            if v[name] < 0:
                raise ConfigError(f"{name} must be >= 0 (got {v[name]})")
        if not v["viscosity.mu0"] > v["viscosity.mu_inf"] > 0:
            raise ConfigError("invariant mu0 > mu_inf > 0 violated")
        if not 0 < v["viscosity.n"] < 1:
            raise ConfigError("viscosity.n must lie in (0, 1)")
        if any(x <= 0 for x in v["pulse.weights"] + v["pulse.durations"]):
            raise ConfigError("pulse weights and durations must be > 0")
        if any(not 0 <= x < 1 for x in v["pulse.starts"]):
            raise ConfigError("pulse start phases must lie in [0, 1)")
        if not 0 < v["micro.theta"] <= 1:
            raise ConfigError("micro.theta must lie in (0, 1]")
        if v["micro.kappa"] != "auto" and v["micro.kappa"] < 0:
            raise ConfigError("micro.kappa must be >= 0")
        if v["archie.check_range"] and not 1.5 <= v["archie.beta"] <= 5 / 3 + 1e-12:
            raise ConfigError("archie.beta must lie in [3/2, 5/3]")
        if not v["time.total"] > v["time.burn_in"]:
            raise ConfigError("invariant time.total > time.burn_in violated (empty snapshot window)")
        if v["time.snapshots"] < 1:
            raise ConfigError("time.snapshots must be >= 1")
        interval = (v["time.total"] - v["time.burn_in"]) / v["time.snapshots"]
        ratio = interval / v["time.dt"]
        if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
            raise ConfigError(f"time.dt must divide the snapshot interval {interval:g} s")
        ratio = v["time.burn_in"] / v["time.dt"]
        if abs(ratio - round(ratio)) > 1e-6:
            raise ConfigError("time.dt must divide time.burn_in")
        if v["mesh.source"] == "file" and not v["mesh.path"]:
            raise ConfigError("mesh.path is required when mesh.source = file")

    @property
    def snapshot_stride(self) -> int:
        v = self.values
        return int(round((v["time.total"] - v["time.burn_in"]) / v["time.snapshots"] / v["time.dt"]))

    @property
    def n_steps(self) -> int:
        v = self.values
        return int(round(v["time.total"] / v["time.dt"]))

    @property
    def snapshot_steps(self):
        v = self.values
        first = int(round(v["time.burn_in"] / v["time.dt"]))
        return [first + i * self.snapshot_stride for i in range(v["time.snapshots"])]

    def echo(self) -> str:
        return "\n".join(f"{k.name} = {self.raw[k.name]}" for k in SCHEMA)
