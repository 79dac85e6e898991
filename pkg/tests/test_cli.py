import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from ihpmp.cli import (
    EXIT_NUMERICAL,
    EXIT_PASS,
    EXIT_USAGE,
    EXIT_VERDICT_FAIL,
    RunConfig,
    flag_overrides,
    resolve_config,
    run,
)


def out_flags(tmp_path: Path, run_name: str = "run") -> list[str]:
    return ["--out_dir", str(tmp_path), "--run_name", run_name]


def test_flag_overrides():
    updates = flag_overrides({"lambda": 0.5, "tol-adjoint": 1e-7, "step": 5e-3, "T": 4.0})
    assert updates == {
        "lam": 0.5,
        "pmp": {"adjoint": 1e-7},
        "integrator": {"step": 5e-3},
        "T": 4.0,
    }


def test_resolve_config_from_file(tmp_path: Path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"problem": "lq-scalar", "params": {"a": -1.0}, "T": 3.0}))
    config = resolve_config(str(path), {"T": 5.0, "tol_max": 1e-3})
    assert config.problem == "lq-scalar"
    assert config.params == {"a": -1.0}
    assert config.T == 5.0
    assert config.pmp.max_condition == 1e-3
    assert RunConfig(psi0=2.5).psi0 == (2.5,)


@pytest.mark.slow
def test_sweep_horizons(tmp_path: Path):
    code = run(["sweep-horizons", *out_flags(tmp_path)])
    assert code == EXIT_PASS
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["classification"] == "NormalFinite"
    np.testing.assert_allclose(report["limit_vector"], [-2.5], atol=1e-6)
    assert (tmp_path / "run" / "sweep.csv").exists()
    assert (tmp_path / "run" / "final_config.yaml").exists()


def test_check_pmp_true_candidate(tmp_path: Path):
    argv = ["check-pmp", "--lambda", "1", "--psi0", "0", "--T", "10", *out_flags(tmp_path)]
    assert run(argv) == EXIT_PASS
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["passed"]
    header = (tmp_path / "run" / "pmp_profile.csv").read_text().splitlines()[0]
    assert header == "t,psi1,max_residual"


def test_check_pmp_tail_integral_candidate(tmp_path: Path):
    argv = ["check-pmp", "--psi0", "2.5", "--T", "10", *out_flags(tmp_path)]
    assert run(argv) == EXIT_VERDICT_FAIL


def test_ak(tmp_path: Path):
    assert run(["ak", "--T", "1", *out_flags(tmp_path)]) == EXIT_PASS
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    np.testing.assert_allclose(report["psi"], [0.33833821], atol=1e-6)


@pytest.mark.slow
def test_analyze_lq(tmp_path: Path):
    # I(0.5; tau) -> 1/2, so psi(0) = -1/2 misses the zero normal cone at the interior point
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"problem": "lq-scalar", "params": {"a": -1.0}, "b_star": 0.5}))
    code = run(["analyze", "--config", str(path), "--T", "5", *out_flags(tmp_path)])
    assert code == EXIT_VERDICT_FAIL
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["sweep"]["classification"] == "NormalFinite"
    np.testing.assert_allclose(report["sweep"]["limit_vector"], [0.5], atol=1e-6)
    assert not report["candidate"]["transversality_holds"]
    assert report["candidate"]["transversality_distance"] == pytest.approx(1 / 3, abs=1e-6)
    assert (tmp_path / "run" / "pmp_profile.csv").exists()


@pytest.mark.slow
def test_metric(tmp_path: Path):
    u, v = tmp_path / "u.csv", tmp_path / "v.csv"
    u.write_text("t,u1\n0,0\n")
    v.write_text("t,u1\n0,1\n0.5,0\n")
    argv = ["metric", "--u", str(u), "--v", str(v), "--T", "2", *out_flags(tmp_path)]
    assert run(argv) == EXIT_PASS
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["rho"]["disagreement"] == pytest.approx(0.5)
    assert report["rho"]["value"] >= 0.5
    rows = np.loadtxt(tmp_path / "run" / "rho_profile.csv", delimiter=",", skiprows=1)
    assert np.all(np.diff(rows[:, 1]) >= 0)


def test_metric_needs_two_controls(tmp_path: Path):
    assert run(["metric", "--T", "1", *out_flags(tmp_path)]) == EXIT_USAGE


@pytest.mark.slow
def test_probes_null_problem(tmp_path: Path):
    argv = ["probes", "--problem", "null", "--tau", "geometric:1:2:4", *out_flags(tmp_path)]
    assert run(argv) == EXIT_PASS


def test_integration_failure(tmp_path: Path):
    spec = {
        "state_dim": 1,
        "control_dim": 1,
        "f": ["x1^2"],
        "u_lo": [0.0],
        "u_hi": [0.0],
        "c_lo": [0.0],
        "c_hi": [2.0],
    }
    path = tmp_path / "blowup.yaml"
    path.write_text(yaml.safe_dump(spec))
    argv = ["check-pmp", "--problem", str(path), "--b_star", "1", "--T", "2"]
    assert run([*argv, *out_flags(tmp_path)]) == EXIT_NUMERICAL


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["solve"],
        ["sweep-horizons", "--bogus", "1"],
        ["sweep-horizons", "--problem", "no-such-problem"],
        ["sweep-horizons", "--tau", "list:3,2,1"],
    ],
)
def test_usage_errors(argv: list[str], tmp_path: Path):
    assert run([*argv, *out_flags(tmp_path)] if argv else argv) == EXIT_USAGE


def test_help():
    assert run(["--help"]) == EXIT_PASS


@pytest.mark.parametrize(
    "argv, tables",
    [
        (["check-pmp", "--lambda", "1", "--psi0", "0", "--T", "5"], ["pmp_profile.csv"]),
        (["ak", "--T", "1"], ["ak_tail.csv"]),
    ],
)
def test_repeated_runs_are_byte_identical(argv: list[str], tables: list[str], tmp_path: Path):
    first = run([*argv, *out_flags(tmp_path, "first")])
    second = run([*argv, *out_flags(tmp_path, "second")])
    assert first == second == EXIT_PASS
    for filename in ["report.json", *tables]:
        a = (tmp_path / "first" / filename).read_bytes()
        b = (tmp_path / "second" / filename).read_bytes()
        assert a == b, filename
