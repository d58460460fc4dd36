"""Coupled time loop, snapshot recording, statistics and file export."""

from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hemodynamics as hd
from . import microcirculation as mc
from .conductivity import ArchieParams, archie
from .config import SimulationConfig
from .fem import FESpace
from .mesh import (
    BoundarySurface,
    CompartmentTable,
    TetMesh,
    VesselSpec,
    compute_lambda,
    extract_boundary,
    generate_synthetic_vessel,
    load_mesh,
)

logger = logging.getLogger(__name__)

FIELDS = ("p", "u", "mu", "c", "sigma")
PEAK_QUANTILE = 0.9


# -- problem setup ----------------------------------------------------------------


@dataclass
class Problem:
    """Mesh, parameters and assembled operators of one run."""

    config: SimulationConfig
    mesh: TetMesh
    surface: BoundarySurface
    lam: np.ndarray  # full-mesh nodal
    flow_params: hd.FlowParams
    viscosity: hd.ViscosityParams
    pulse: hd.PulseSpec
    diff_params: mc.DiffusionParams
    archie_params: ArchieParams
    flow_ops: hd.FlowOperators
    micro_ops: mc.MicroOperators
    kappa: float
    varsigma: float
    epsilon: np.ndarray  # tissue-local nodal absorption amplitude
    vmax: float
    diastolic: float
    sigma_m: np.ndarray  # full-mesh nodal background conductivity
    wall_omega: np.ndarray  # wall nodes, omega-local ids
    wall_tissue: np.ndarray  # same nodes, tissue-local ids
    pulse_support: np.ndarray  # omega-local mask
    info: dict = field(default_factory=dict)

    @property
    def omega(self):
        return self.mesh.omega

    @property
    def tissue(self):
        return self.mesh.tissue

    def boundary_pulse(self, t: float) -> np.ndarray:
        """Pulse on omega-local nodes; zero off the wall and outside the spheres."""
        val = np.zeros(self.omega.n_nodes)
        val[self.pulse_support] = float(self.pulse.temporal(t))
        return val


def build_mesh(cfg: SimulationConfig) -> TetMesh:
    table = CompartmentTable.default()
    if cfg.path("mesh.compartments"):
        table = CompartmentTable.from_file(cfg.path("mesh.compartments"))
    if cfg["mesh.source"] == "file":
        return load_mesh(cfg.path("mesh.path"), table)
    spec = VesselSpec(
        radius=cfg["mesh.radius"],
        length=cfg["mesh.length"],
        box=cfg["mesh.box"],
        h=cfg["mesh.h"],
        kind=cfg["mesh.kind"],
        angle_deg=cfg["mesh.angle"],
        tissue_label=cfg["mesh.tissue_label"],
    )
    return generate_synthetic_vessel(spec, table)


def _pulse_spec(cfg: SimulationConfig, wall_points: np.ndarray) -> hd.PulseSpec:
    spheres = []
    auto = {1: wall_points.mean(axis=0), 2: wall_points[np.argmin(wall_points[:, 2])]}
    for k in (1, 2):
        c = cfg[f"pulse.sphere{k}_center"]
        if c == "auto":
            c = auto[k]
        spheres.append(hd.Sphere(tuple(float(v) for v in c), cfg[f"pulse.sphere{k}_radius"]))
    return hd.PulseSpec(
        weights=cfg["pulse.weights"],
        durations=cfg["pulse.durations"],
        starts=cfg["pulse.starts"],
        cycle=60.0 / cfg["pulse.bpm"],
        pulse_pressure=cfg["pulse.pulse_pressure"] * hd.MMHG,
        spheres=tuple(spheres),
    )


def build_problem(cfg: SimulationConfig, mesh: TetMesh | None = None) -> Problem:
    mesh = mesh or build_mesh(cfg)
    surface = extract_boundary(mesh)
    lam = compute_lambda(mesh, surface)
    omega, tissue = mesh.omega, mesh.tissue

    fp = hd.FlowParams(
        rho=cfg["flow.rho"],
        mu=cfg["flow.mu"],
        flow=cfg["flow.total_flow"] * hd.ML_PER_MIN,
        pressure=cfg["flow.pressure"] * hd.MMHG,
        arteriole_area=np.pi * cfg["flow.arteriole_radius"] ** 2,
        beta_dist=cfg["flow.beta_dist"],
        volume=cfg["flow.volume"],
        gravity=cfg["flow.gravity"],
        eps_leray=cfg["flow.eps_leray"],
        eps_visc=cfg["flow.eps_visc"],
        dt=cfg["time.dt"],
    )
    visc = hd.ViscosityParams(
        cfg["viscosity.mu0"], cfg["viscosity.mu_inf"], cfg["viscosity.relaxation"], cfg["viscosity.n"], cfg["viscosity.a"]
    )
    area = surface.total_area
    bcoef = hd.boundary_coefficient(fp, area, lam[omega.nodes], cfg["flow.boundary_coeff"])
    space_o = FESpace.from_subdomain(omega)
    flow_ops = hd.FlowOperators.build(
        space_o,
        omega.localize(surface.triangles),
        bcoef,
        fp,
        viscosity=visc,
        scheme=cfg["flow.velocity_scheme"],
        gravity_mode=cfg["flow.gravity_mode"],
        rtol=cfg["solver.rtol"],
    )

    pulse = _pulse_spec(cfg, mesh.nodes[surface.nodes])
    wall_omega = omega.localize(surface.nodes)
    support = np.zeros(omega.n_nodes, bool)
    support[wall_omega] = pulse.support(mesh.nodes[surface.nodes])

    dp = mc.DiffusionParams(
        theta=cfg["micro.theta"],
        arteriole_length=cfg["micro.arteriole_length"],
        kappa=None if cfg["micro.kappa"] == "auto" else cfg["micro.kappa"],
        epsilon_variant=cfg["micro.epsilon_variant"],
        lumped=cfg["micro.mass_lumping"],
    )
    space_t = FESpace.from_subdomain(tissue)
    varsigma = mc.compute_varsigma(fp)
    vmax = float(space_t.vols.max())
    lam_t = lam[tissue.nodes]
    eps = mc.compute_epsilon(varsigma, lam_t, dp.theta, dp.arteriole_length, vmax, dp.epsilon_variant)
    wall_tissue = tissue.localize(surface.nodes)
    micro_ops = mc.MicroOperators(
        space_t, tissue.localize(surface.triangles), lam_t, varsigma, eps, fp.dt, cfg["solver.rtol"], lumped=dp.lumped
    )
    kappa = micro_ops.calibrate_kappa() if dp.kappa is None else dp.kappa

    ap = ArchieParams(cfg["archie.beta"], cfg["archie.sigma_fluid"], cfg["archie.check_range"])
    diastolic = fp.pressure - 0.5 * pulse.pulse_pressure
    info = {
        "nodes": mesh.n_nodes,
        "tets": mesh.n_tets,
        "omega_nodes": omega.n_nodes,
        "omega_tets": len(omega.tets),
        "tissue_nodes": tissue.n_nodes,
        "tissue_tets": len(tissue.tets),
        "wall_area_m2": area,
        "zeta_per_m": hd.compute_zeta(fp, area),
        "nu_bar_mps": hd.compute_nu_bar(fp, area),
        "varsigma_m2ps": varsigma,
        "vmax_m3": vmax,
        "kappa_per_s": float(kappa),
        "cycle_s": pulse.cycle,
        "pulse_amplitude_Pa": float(pulse.amplitude),
        "pulse_support_nodes": int(support.sum()),
    }
    return Problem(
        config=cfg,
        mesh=mesh,
        surface=surface,
        lam=lam,
        flow_params=fp,
        viscosity=visc,
        pulse=pulse,
        diff_params=dp,
        archie_params=ap,
        flow_ops=flow_ops,
        micro_ops=micro_ops,
        kappa=kappa,
        varsigma=varsigma,
        epsilon=eps,
        vmax=vmax,
        diastolic=diastolic,
        sigma_m=mesh.nodal_compartment_value(mesh.tet_sigma),
        wall_omega=wall_omega,
        wall_tissue=wall_tissue,
        pulse_support=support,
        info=info,
    )


# -- time lapse ---------------------------------------------------------------------


@dataclass
class TimeLapse:
    """Recorded snapshots.

    ``p``, ``u`` and ``mu`` live on the artery nodes (``omega_nodes``), ``c`` on
    the tissue nodes and ``sigma`` on every mesh node.
    """

    times: np.ndarray
    p: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    c: np.ndarray
    sigma: np.ndarray
    omega_nodes: np.ndarray
    tissue_nodes: np.ndarray
    n_nodes: int
    clamped_fraction: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times, float)
        if len(t) > 1:
            d = np.diff(t)
            if np.any(d <= 0):
                raise ValueError("snapshot times must increase strictly")
            if np.max(np.abs(d - d[0])) > 1e-9:
                raise ValueError("snapshot times must be uniformly spaced")

    def __len__(self):
        return len(self.times)

    def full(self, name: str, values: np.ndarray) -> np.ndarray:
        """Scatter a subdomain field onto every mesh node (zero elsewhere)."""
        if name == "sigma":
            return np.asarray(values)
        idx = self.tissue_nodes if name == "c" else self.omega_nodes
        shape = (self.n_nodes,) + np.shape(values)[1:]
        out = np.zeros(shape)
        out[idx] = values
        return out

    def snapshot(self, k: int) -> dict[str, np.ndarray]:
        return {name: self.full(name, getattr(self, name)[k]) for name in FIELDS}

    def save(self, path):
        np.savez_compressed(
            path,
            **{n: getattr(self, n) for n in ("times",) + FIELDS},
            omega_nodes=self.omega_nodes,
            tissue_nodes=self.tissue_nodes,
            n_nodes=self.n_nodes,
            clamped_fraction=self.clamped_fraction if self.clamped_fraction is not None else np.zeros(0),
        )

    @classmethod
    def load(cls, path) -> "TimeLapse":
        with np.load(path) as z:
            return cls(
                times=z["times"],
                p=z["p"],
                u=z["u"],
                mu=z["mu"],
                c=z["c"],
                sigma=z["sigma"],
                omega_nodes=z["omega_nodes"],
                tissue_nodes=z["tissue_nodes"],
                n_nodes=int(z["n_nodes"]),
                clamped_fraction=z["clamped_fraction"] if z["clamped_fraction"].size else None,
            )


def run_simulation(cfg_or_problem, progress=None) -> TimeLapse:
    """Run the coupled loop and record the post-burn-in snapshots.

    Per step: boundary pulse, pressure, viscosity, velocity, Leray filter,
    concentration source and step, conductivity.
    """
    prob = cfg_or_problem if isinstance(cfg_or_problem, Problem) else build_problem(cfg_or_problem)
    cfg = prob.config
    dt = prob.flow_params.dt
    ops, mops = prob.flow_ops, prob.micro_ops
    omega, tissue = prob.omega, prob.tissue
    record = {k: i for i, k in enumerate(cfg.snapshot_steps)}
    n_snap = len(record)

    state = hd.initial_state(ops, prob.diastolic, prob.boundary_pulse(0.0))
    state.pb_prev = prob.boundary_pulse(-dt)
    cstate = mc.ConcentrationState(c=np.zeros(tissue.n_nodes), w=np.zeros(tissue.n_nodes))
    lam_wall = prob.micro_ops.lam

    buf = {
        "p": np.empty((n_snap, omega.n_nodes)),
        "u": np.empty((n_snap, omega.n_nodes, 3)),
        "mu": np.empty((n_snap, omega.n_nodes)),
        "c": np.empty((n_snap, tissue.n_nodes)),
        "sigma": np.empty((n_snap, prob.mesh.n_nodes)),
    }
    times = np.empty(n_snap)
    clamped = np.zeros(cfg.n_steps)
    c_full = np.zeros(prob.mesh.n_nodes)
    t0 = _time.perf_counter()
    for k in range(1, cfg.n_steps + 1):
        t = k * dt
        state = hd.advance(state, ops, prob.boundary_pulse(t))
        p_wall = np.zeros(tissue.n_nodes)
        p_wall[prob.wall_tissue] = state.p[prob.wall_omega]
        s = prob.kappa * mc.source_shape(p_wall, lam_wall, prob.diastolic, prob.pulse.pulse_pressure)
        cstate = mc.concentration_step(cstate, mops, mops.load(s))
        clamped[k - 1] = cstate.clamped_fraction
        if k in record:
            i = record[k]
            c_full[:] = 0.0
            c_full[tissue.nodes] = cstate.c
            sigma = archie(np.clip(c_full, 0, 1), prob.sigma_m, prob.archie_params)
            sigma[omega.nodes] = prob.archie_params.sigma_fluid
            times[i] = t
            buf["p"][i] = state.p + ops.hydrostatic
            buf["u"][i] = state.u
            buf["mu"][i] = state.mu
            buf["c"][i] = cstate.c
            buf["sigma"][i] = sigma
        if progress is not None:
            progress(k, cfg.n_steps, state, cstate)
    logger.info("time loop: %d steps in %.1f s", cfg.n_steps, _time.perf_counter() - t0)
    return TimeLapse(
        times=times,
        omega_nodes=omega.nodes,
        tissue_nodes=tissue.nodes,
        n_nodes=prob.mesh.n_nodes,
        clamped_fraction=clamped,
        **buf,
    )


# -- statistics ------------------------------------------------------------------------


@dataclass
class SummaryStats:
    """Per-node temporal mean, 90% quantile peak and population STD of each field.

    Velocity statistics are taken on the speed |u|.
    """

    mean: dict[str, np.ndarray]
    peak: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    count: int


def temporal_quantile(samples: np.ndarray, q: float = PEAK_QUANTILE) -> np.ndarray:
    """Sorted sample at index floor(q N) (clipped to N-1) along axis 0."""
    n = samples.shape[0]
    idx = min(int(np.floor(q * n + 1e-9)), n - 1)
    return np.sort(samples, axis=0)[idx]


def series_stats(samples: np.ndarray, q: float = PEAK_QUANTILE):
    samples = np.asarray(samples, float)
    if samples.shape[0] < 2:
        raise ValueError("statistics need at least two snapshots")
    return samples.mean(axis=0), temporal_quantile(samples, q), samples.std(axis=0)


def summarize(lapse: TimeLapse, q: float = PEAK_QUANTILE) -> SummaryStats:
    if len(lapse) < 2:
        raise ValueError("statistics need at least two snapshots")
    mean, peak, std = {}, {}, {}
    for name in FIELDS:
        data = getattr(lapse, name)
        if name == "u":
            data = np.linalg.norm(data, axis=2)
        mean[name], peak[name], std[name] = series_stats(data, q)
    return SummaryStats(mean, peak, std, len(lapse))


# -- export -------------------------------------------------------------------------------

CSV_HEADER = "time_s,p_Pa,u_mps,mu_Pas,c,sigma_Spm"


def write_vtk(path, mesh: TetMesh, point_scalars: dict[str, np.ndarray], point_vectors: dict[str, np.ndarray] | None = None, title="hemoatlas"):
    """Legacy ASCII VTK unstructured grid of linear tetrahedra (cell type 10)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, m = mesh.n_nodes, mesh.n_tets
    with path.open("w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n} double\n")
        np.savetxt(fh, mesh.nodes, fmt="%.17g")
        fh.write(f"CELLS {m} {5 * m}\n")
        np.savetxt(fh, np.hstack([np.full((m, 1), 4), mesh.tets]), fmt="%d")
        fh.write(f"CELL_TYPES {m}\n")
        np.savetxt(fh, np.full(m, 10), fmt="%d")
        fh.write(f"CELL_DATA {m}\nSCALARS label int 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, mesh.labels, fmt="%d")
        fh.write(f"POINT_DATA {n}\n")
        for name, vals in point_scalars.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            np.savetxt(fh, np.asarray(vals, float), fmt="%.10g")
        for name, vals in (point_vectors or {}).items():
            fh.write(f"VECTORS {name} double\n")
            np.savetxt(fh, np.asarray(vals, float).reshape(n, 3), fmt="%.10g")


def snapshot_arrays(lapse: TimeLapse, k: int):
    snap = lapse.snapshot(k)
    scalars = {
        "p": snap["p"],
        "u_mag": np.linalg.norm(snap["u"], axis=1),
        "mu": snap["mu"],
        "c": snap["c"],
        "sigma": snap["sigma"],
    }
    return scalars, {"u": snap["u"]}


def export_snapshots(lapse: TimeLapse, mesh: TetMesh, directory, indices=None) -> list[Path]:
    directory = Path(directory)
    paths = []
    for k in range(len(lapse)) if indices is None else indices:
        scalars, vectors = snapshot_arrays(lapse, k)
        p = directory / f"snapshot_{k:04d}.vtk"
        write_vtk(p, mesh, scalars, vectors, title=f"t = {lapse.times[k]:.6f} s")
        paths.append(p)
    return paths


def export_summary(stats: SummaryStats, lapse: TimeLapse, mesh: TetMesh, path) -> Path:
    scalars = {}
    for kind in ("mean", "peak", "std"):
        d = getattr(stats, kind)
        for name in FIELDS:
            key = "u_mag" if name == "u" else name
            scalars[f"{key}_{kind}"] = lapse.full(name, d[name])
    write_vtk(path, mesh, scalars, title=f"summary of {stats.count} snapshots")
    return Path(path)


def export_probes(lapse: TimeLapse, mesh: TetMesh, points, directory) -> list[Path]:
    """One CSV per probe; the probe reads its nearest mesh node."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    omega_pos = np.full(lapse.n_nodes, -1)
    omega_pos[lapse.omega_nodes] = np.arange(len(lapse.omega_nodes))
    tissue_pos = np.full(lapse.n_nodes, -1)
    tissue_pos[lapse.tissue_nodes] = np.arange(len(lapse.tissue_nodes))
    for j, pt in enumerate(points):
        node = mesh.nearest_node(pt)
        io, it = omega_pos[node], tissue_pos[node]
        zeros = np.zeros(len(lapse))
        cols = [
            lapse.times,
            lapse.p[:, io] if io >= 0 else zeros,
            np.linalg.norm(lapse.u[:, io], axis=1) if io >= 0 else zeros,
            lapse.mu[:, io] if io >= 0 else zeros,
            lapse.c[:, it] if it >= 0 else zeros,
            lapse.sigma[:, node],
        ]
        path = directory / f"probe_{j}.csv"
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=CSV_HEADER, comments="", fmt="%.12g")
        paths.append(path)
    return paths


# -- diagnostics -----------------------------------------------------------------------------


def radial_profile(prob: Problem, c_tissue: np.ndarray, bin_width: float | None = None):
    """Mean concentration of tissue nodes binned by distance to the artery wall."""
    from scipy.spatial import cKDTree

    surf = prob.surface
    pts = prob.mesh.nodes[prob.tissue.nodes]
    # dense sampling of the wall triangles
    bary = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1 / 3, 1 / 3, 1 / 3], [2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    samples = np.einsum("qk,tkd->tqd", bary, prob.mesh.nodes[surf.triangles]).reshape(-1, 3)
    dist, _ = cKDTree(samples).query(pts)
    h = bin_width or prob.flow_ops.space_edge
    bins = np.floor(dist / h + 1e-9).astype(int)
    nb = bins.max() + 1
    sums = np.bincount(bins, weights=c_tissue, minlength=nb)
    cnt = np.bincount(bins, minlength=nb)
    ok = cnt > 0
    centers = (np.arange(nb) + 0.5) * h
    return centers[ok], sums[ok] / cnt[ok]
