"""Command-line entry point: ``hemoatlas <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import pipeline as pl
from .config import ConfigError, SimulationConfig, default_text, help_text
from .fem import SolverError
from .hemodynamics import NumericalAbort
from .mesh import MeshError, load_mesh, save_mesh

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3
LAPSE_FILE = "lapse.npz"
MESH_FILE = "mesh.txt"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="configuration file (INI sections, see key list below)")
    p.add_argument("--set", metavar="K=V", action="append", default=[], dest="overrides", help="override a config key (repeatable)")
    p.add_argument("--output", metavar="DIR", help="output directory (overrides output.directory)")
    p.add_argument("--threads", metavar="N", type=int, help="size of the BLAS/LAPACK thread pool")
    p.add_argument("--verbose", "-v", action="store_true", help="progress and debug logging")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="hemoatlas",
        description="Blood-flow driven conductivity atlas on tetrahedral head meshes.",
        epilog=help_text(),
        formatter_class=fmt,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{mesh-gen,simulate,stats,export,validate,defaults}")
    commands = {
        "mesh-gen": "generate the synthetic vessel mesh and write it in the ASCII mesh format",
        "simulate": "run the coupled simulation and write the time lapse, summary and probes",
        "stats": "summarize a stored time lapse (mean, 90%% peak, STD)",
        "export": "write VTK snapshots and probe CSV files from a stored time lapse",
        "validate": "check the configuration and the mesh without simulating",
        "defaults": "print a configuration file holding every default",
    }
    for name, text in commands.items():
        p = sub.add_parser(name, help=text, description=text, epilog=help_text(), formatter_class=fmt)
        _common(p)
        if name in ("stats", "export"):
            p.add_argument("--lapse", metavar="PATH", help=f"stored time lapse (default OUTPUT/{LAPSE_FILE})")
        if name == "export":
            p.add_argument("--snapshots", metavar="I,J,..", help="snapshot indices to export (default all)")
    return parser


def _load_config(args) -> SimulationConfig:
    cfg = SimulationConfig.load(args.config, args.overrides)
    if args.output:
        cfg = SimulationConfig({**cfg.raw, "output.directory": args.output}, cfg.base_dir)
    return cfg


def _manifest(cfg: SimulationConfig, **extra) -> dict:
    return {"version": __version__, "parameters": dict(cfg.raw), **extra}


def _print_manifest(manifest: dict, out) -> None:
    print("# run manifest", file=out)
    for k, v in manifest["parameters"].items():
        print(f"{k} = {v}", file=out)
    for k, v in manifest.items():
        if k == "parameters":
            continue
        if isinstance(v, dict):
            for kk, vv in v.items():
                print(f"{k}.{kk} = {vv}", file=out)
        else:
            print(f"{k} = {v}", file=out)


def _write_manifest(manifest: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float) + "\n")


def _mesh_for(cfg: SimulationConfig):
    stored = cfg.path("output.directory") / MESH_FILE
    return load_mesh(stored) if stored.exists() else pl.build_mesh(cfg)


def _cmd_defaults(cfg, args, out) -> int:
    out.write(default_text())
    return EXIT_OK


def _cmd_mesh_gen(cfg, args, out) -> int:
    t0 = time.perf_counter()
    mesh = pl.build_mesh(cfg)
    outdir = cfg.path("output.directory")
    path = outdir / MESH_FILE
    save_mesh(mesh, path)
    m = _manifest(cfg, mesh={"nodes": mesh.n_nodes, "tets": mesh.n_tets, "path": str(path)}, wall_time_s=time.perf_counter() - t0)
    _write_manifest(m, outdir)
    _print_manifest(m, out)
    return EXIT_OK


def _cmd_validate(cfg, args, out) -> int:
    t0 = time.perf_counter()
    prob = pl.build_problem(cfg)
    m = _manifest(cfg, mesh=prob.info, steps=cfg.n_steps, snapshots=len(cfg.snapshot_steps), wall_time_s=time.perf_counter() - t0)
    _print_manifest(m, out)
    print("configuration and mesh are valid", file=out)
    return EXIT_OK


def _cmd_simulate(cfg, args, out) -> int:
    t0 = time.perf_counter()
    prob = pl.build_problem(cfg)
    log = logging.getLogger("hemoatlas.cli")
    every = max(cfg.n_steps // 20, 1)

    def progress(k, n, state, cstate):
        if k % every == 0:
            log.info("step %d/%d t=%.3f s", k, n, k * prob.flow_params.dt)

    lapse = pl.run_simulation(prob, progress)
    outdir = cfg.path("output.directory")
    outdir.mkdir(parents=True, exist_ok=True)
    save_mesh(prob.mesh, outdir / MESH_FILE)
    lapse.save(outdir / LAPSE_FILE)
    stats = pl.summarize(lapse) if len(lapse) >= 2 else None
    if stats is not None:
        pl.export_summary(stats, lapse, prob.mesh, outdir / "summary.vtk")
    if cfg["output.probes"]:
        pl.export_probes(lapse, prob.mesh, cfg["output.probes"], outdir / "probes")
    if cfg["output.vtk_snapshots"]:
        pl.export_snapshots(lapse, prob.mesh, outdir / "snapshots")
    m = _manifest(
        cfg,
        mesh=prob.info,
        steps=cfg.n_steps,
        snapshots=len(lapse),
        window_s=[float(lapse.times[0]), float(lapse.times[-1])],
        max_clamped_fraction=float(lapse.clamped_fraction.max()),
        wall_time_s=time.perf_counter() - t0,
    )
    _write_manifest(m, outdir)
    _print_manifest(m, out)
    return EXIT_OK


def _load_lapse(cfg, args) -> pl.TimeLapse:
    path = Path(args.lapse) if args.lapse else cfg.path("output.directory") / LAPSE_FILE
    if not path.exists():
        raise ConfigError(f"time lapse not found: {path} (run 'simulate' first)")
    return pl.TimeLapse.load(path)


def _cmd_stats(cfg, args, out) -> int:
    lapse = _load_lapse(cfg, args)
    try:
        stats = pl.summarize(lapse)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    mesh = _mesh_for(cfg)
    path = pl.export_summary(stats, lapse, mesh, cfg.path("output.directory") / "summary.vtk")
    print(f"{'field':<6} {'mean min':>12} {'mean max':>12} {'peak max':>12} {'std max':>12}", file=out)
    for name in pl.FIELDS:
        mean, peak, std = stats.mean[name], stats.peak[name], stats.std[name]
        print(f"{name:<6} {mean.min():12.5g} {mean.max():12.5g} {peak.max():12.5g} {std.max():12.5g}", file=out)
    print(f"snapshots = {stats.count}", file=out)
    print(f"summary = {path}", file=out)
    return EXIT_OK


def _cmd_export(cfg, args, out) -> int:
    lapse = _load_lapse(cfg, args)
    mesh = _mesh_for(cfg)
    if mesh.n_nodes != lapse.n_nodes:
        raise ConfigError(f"mesh has {mesh.n_nodes} nodes but the time lapse has {lapse.n_nodes}")
    indices = None
    if args.snapshots:
        try:
            indices = [int(i) for i in args.snapshots.split(",")]
        except ValueError:
            raise ConfigError(f"bad snapshot list {args.snapshots!r}") from None
        bad = [i for i in indices if not 0 <= i < len(lapse)]
        if bad:
            raise ConfigError(f"snapshot indices out of range 0..{len(lapse) - 1}: {bad}")
    outdir = cfg.path("output.directory")
    paths = pl.export_snapshots(lapse, mesh, outdir / "snapshots", indices)
    if cfg["output.probes"]:
        paths += pl.export_probes(lapse, mesh, cfg["output.probes"], outdir / "probes")
    for p in paths:
        print(p, file=out)
    return EXIT_OK


COMMANDS = {
    "mesh-gen": _cmd_mesh_gen,
    "simulate": _cmd_simulate,
    "stats": _cmd_stats,
    "export": _cmd_export,
    "validate": _cmd_validate,
    "defaults": _cmd_defaults,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("hemoatlas: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose:
        logging.getLogger("hemoatlas").setLevel(logging.INFO)
    if args.threads is not None and args.threads < 1:
        print("hemoatlas: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _load_config(args)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args, sys.stdout)
    except (ConfigError, MeshError) as exc:
        print(f"hemoatlas: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalAbort, SolverError) as exc:
        print(f"hemoatlas: numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except OSError as exc:
        print(f"hemoatlas: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
