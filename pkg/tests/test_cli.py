import json

import numpy as np

from hemoatlas.cli import LAPSE_FILE, MESH_FILE, main
from hemoatlas.config import SCHEMA

SMALL = [
    "mesh.kind=straight",
    "mesh.radius=1e-3",
    "mesh.length=4e-3",
    "mesh.box=5e-3,5e-3,8e-3",
    "mesh.h=0.5e-3",
    "time.total=0.05",
    "time.burn_in=0.03",
    "time.snapshots=2",
]


def sets(items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


def test_no_subcommand_exits_2(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    assert main(["simulate", "--bogus"]) == 2


def test_burn_in_invariant_named(tmp_path, capsys):
    cfg = tmp_path / "broken.cfg"
    cfg.write_text("[time]\ntotal = 2\nburn_in = 3\n")
    assert main(["validate", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "time.total > time.burn_in" in err


def test_unknown_override_key(capsys):
    assert main(["validate", "--set", "flow.nothing=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_help_lists_every_key(capsys):
    for argv in (["--help"], ["simulate", "--help"]):
        assert main(argv) == 0
        text = capsys.readouterr().out
        for k in SCHEMA:
            assert f"{k.name} = {k.default} [{k.unit}]" in text


def test_defaults_subcommand(capsys):
    assert main(["defaults"]) == 0
    out = capsys.readouterr().out
    assert "[pulse]" in out and "bpm = 60" in out


def test_validate_reports_cycle_for_80_bpm(tmp_path, capsys):
    args = ["validate", "--output", str(tmp_path)] + sets(SMALL + ["pulse.bpm=80"])
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "mesh.cycle_s = 0.75" in out
    assert "pulse.bpm = 80" in out
    assert "wall_time_s" in out


def test_mesh_gen_writes_mesh(tmp_path, capsys):
    assert main(["mesh-gen", "--output", str(tmp_path)] + sets(SMALL)) == 0
    assert (tmp_path / MESH_FILE).exists()
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["mesh"]["tets"] > 0


def test_simulate_stats_export(tmp_path, capsys):
    probe = "output.probes=0,0,0; 2e-3,2e-3,3e-3"
    args = sets(SMALL + [probe])
    assert main(["simulate", "--output", str(tmp_path), "--threads", "1"] + args) == 0
    out = capsys.readouterr().out
    assert "# run manifest" in out and "snapshots = 2" in out
    for name in (LAPSE_FILE, MESH_FILE, "manifest.json", "summary.vtk", "probes/probe_0.csv", "probes/probe_1.csv"):
        assert (tmp_path / name).exists(), name
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert np.allclose(m["window_s"], [0.03, 0.04])

    assert main(["stats", "--output", str(tmp_path)] + args) == 0
    out = capsys.readouterr().out
    assert "snapshots = 2" in out and out.count("\n") >= 7

    assert main(["export", "--output", str(tmp_path), "--snapshots", "1"] + args) == 0
    assert (tmp_path / "snapshots" / "snapshot_0001.vtk").exists()
    assert main(["export", "--output", str(tmp_path), "--snapshots", "9"] + args) == 2


def test_stats_without_lapse(tmp_path, capsys):
    assert main(["stats", "--output", str(tmp_path)]) == 2
    assert "simulate" in capsys.readouterr().err


def test_numerical_abort_exit_3(tmp_path, capsys, monkeypatch):
    from hemoatlas import pipeline as pl
    from hemoatlas.hemodynamics import NumericalAbort

    def boom(*a, **k):
        raise NumericalAbort(7, "pressure")

    monkeypatch.setattr(pl, "run_simulation", boom)
    assert main(["simulate", "--output", str(tmp_path)] + sets(SMALL)) == 3
    assert "step 7" in capsys.readouterr().err
