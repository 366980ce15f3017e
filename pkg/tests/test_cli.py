import json
import subprocess
import sys

import pytest

from weakbohm import __version__
from weakbohm.cli import main

SMALL = """\
name: small
seed: 17
grid:
  extents: [[-20.0, 20.0]]
  points: [128]
state:
  kind: gaussian
  center: -2.0
  width: 1.0
  kick: 1.0
propagator:
  dt: 0.0025
  t_final: 1.0
  snapshot_stride: 20
protocol:
  time: 0.5
  sigma_factor: 5.0
  tau: [0.025]
  n_runs: 20000
  bins: {lo: -5.0, hi: 5.0, count: 10}
  min_count: 200
  extrapolation:
    tau: [0.25, 0.5]
    sigma_factors: [3.0, 6.0]
    n_runs: 20000
    min_count: 500
  write_records: true
trajectories:
  n_paths: 3000
  dt_path: 0.01
  record_every: 5
  bundle: 20
  histogram_bins: {lo: -8.0, hi: 8.0, count: 32}
  estimated:
    stride: 40
    tau: 0.05
    sigma_factor: 3.0
    n_runs: 5000
    bins: {lo: -8.0, hi: 8.0, count: 16}
    min_count: 50
    n_paths: 100
diagnostics:
  t_center: 0.5
  stride: 10
  refinements: 1
  expect: both compatible
equilibrium:
  priors: [1.0, uniform]
  refinements: 1
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


def run(*args):
    return main([str(a) for a in args])


def test_all_writes_manifest_last(small, tmp_path):
    out = tmp_path / "run"
    assert run("all", "--config", small, "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    files = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
    assert set(manifest["artifacts"]) == files
    assert manifest["version"] == __version__ and manifest["seed"] == 17
    assert manifest["config"]["protocol"]["n_runs"] == 20000
    assert "threads" not in json.dumps(manifest)
    for key in ("evolve", "field", "weaksim", "paths", "diagnose", "equilibrium"):
        assert key in manifest["summary"]
    assert manifest["summary"]["paths"]["ks_distance"] < 0.05
    assert "weaksim/records.csv" in files and "paths/histogram.csv" in files


def test_threads_do_not_change_artifacts(small, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("all", "--config", small, "--out", a, "--threads", 1) == 0
    assert run("all", "--config", small, "--out", b, "--threads", 3) == 0
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["artifacts"] == mb["artifacts"]
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_seed_flag_overrides_config(small, tmp_path):
    assert run("weaksim", "--config", small, "--out", tmp_path / "s1", "--seed", 3) == 0
    m = json.loads((tmp_path / "s1" / "manifest.json").read_text())
    assert m["seed"] == 3 and m["config"]["seed"] == 3


def test_zero_runs_is_a_validation_error(small, tmp_path, capsys):
    small.write_text(SMALL.replace("n_runs: 20000", "n_runs: 0", 1))
    assert run("weaksim", "--config", small, "--out", tmp_path / "z") == 2
    err = capsys.readouterr().err
    assert "protocol.n_runs" in err and ":19:" in err
    assert not (tmp_path / "z" / "manifest.json").exists()


def test_unknown_key_is_a_validation_error(small, tmp_path, capsys):
    small.write_text(SMALL.replace("  kick: 1.0\n", "  kick: 1.0\n  spin: up\n"))
    assert run("evolve", "--config", small, "--out", tmp_path / "u") == 2
    assert "state.spin" in capsys.readouterr().err


def test_unstable_step_is_refused(small, tmp_path, capsys):
    small.write_text(SMALL.replace("points: [128]", "points: [512]"))
    assert run("evolve", "--config", small, "--out", tmp_path / "g") == 3
    assert "refusing" in capsys.readouterr().err


def test_missing_section_is_a_validation_error(tmp_path):
    assert run("paths", "--config", "relaxation_box", "--out", tmp_path / "m") == 2
    assert run("weaksim", "--config", "harmonic_coherent", "--out", tmp_path / "w") == 2


def test_harmonic_diagnose_reports_compatible(tmp_path):
    out = tmp_path / "h"
    assert run("diagnose", "--config", "harmonic_coherent", "--out", out, "--check") == 0
    report = json.loads((out / "diagnose" / "report.json").read_text())
    assert report["verdict"] == "both compatible"
    assert report["momentum_rel"][0] < 1e-3 and report["momentum_resolution_limited"]


def test_check_mode_flags_wrong_expectation(small, tmp_path):
    small.write_text(SMALL.replace("expect: both compatible", "expect: momentum incompatible"))
    assert run("diagnose", "--config", small, "--out", tmp_path / "c") == 0
    assert run("diagnose", "--config", small, "--out", tmp_path / "c", "--check") == 4
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert m["checks"]["failures"]


def test_quartic_equilibrium_check_passes(tmp_path):
    assert run("equilibrium", "--config", "quartic_superposition", "--out", tmp_path / "q", "--check") == 0


def test_bad_thread_count(small, tmp_path):
    assert run("evolve", "--config", small, "--out", tmp_path / "t", "--threads", 0) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "weakbohm", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
