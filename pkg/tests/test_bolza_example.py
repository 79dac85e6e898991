from pathlib import Path

import numpy as np
import pytest

from ihpmp.experiments.bolza.bolza_example import (
    WORST_CASE_BOUND,
    BolzaExampleConfig,
    ak_failure_demo,
    eta_checks,
    inequality_checks,
    main,
    overtaking_gap_probe,
    run_example,
    sensitivity_table,
    trajectory_checks,
    write_artifacts,
)
from ihpmp.experiments.bolza.oracles import (
    closed_form_trajectory,
    control_library,
    crossing_time,
    eta_constant,
    g,
    g_and_inequalities,
    initial_state_for_crossing,
    lower_bound_after_crossing,
    lower_bound_at_horizon,
    tail_costate,
    true_costate,
)
from ihpmp.integrate import IntegratorConfig, integrate_state
from ihpmp.problems.base import ControlSignal
from ihpmp.problems.registry import bolza_example

SMALL_RUN = {
    "n_initial": 13,
    "n_controls": 12,
    "gap_horizons": (5.0, 10.0),
    "sweep_horizons": "geometric:1:2:6",
}


def test_g_values():
    assert float(g(2.0)) == 22.0
    assert float(g(1.0)) == -4.0
    assert float(g(0.0)) == 0.0


def test_g_and_inequalities():
    check = g_and_inequalities(2.0)
    assert check.g == 22.0
    assert check.above_fourth_power and check.above_linear
    check = g_and_inequalities(0.5)
    assert check.g == pytest.approx(0.5 * (0.0625 - 5))
    assert check.above_linear
    assert g_and_inequalities(-1.0).above_linear


def test_closed_form_trajectory():
    assert initial_state_for_crossing(3.0) == pytest.approx(0.4)
    assert float(closed_form_trajectory(3.0, 0.0)) == pytest.approx(0.4)
    assert float(closed_form_trajectory(3.0, 3.0)) == pytest.approx(1.0)
    assert float(closed_form_trajectory(1.0, 2.0)) == pytest.approx((np.e + 1) / 2)


def test_eta_constant():
    eta = eta_constant()
    assert eta == pytest.approx(0.688482, abs=1e-6)
    for theta in (0.5, 1.0, 3.0):
        assert abs(float(g(closed_form_trajectory(theta, theta + eta)))) <= 1e-9


def test_costate_closed_forms():
    assert float(true_costate(10.0)) == pytest.approx(-2.4999999948, abs=1e-10)
    assert float(true_costate(0.0)) == 0.0
    assert float(true_costate(1.0, lam=2.0)) == pytest.approx(5.0 * (np.exp(-2.0) - 1.0))
    assert float(tail_costate(0.0)) == 2.5


def test_lower_bounds():
    assert lower_bound_after_crossing(0.0) == WORST_CASE_BOUND
    assert lower_bound_after_crossing(1.0) == pytest.approx(-4.0)
    assert lower_bound_at_horizon(1.0, 5.0) == pytest.approx(-4.0 + 2.0 * np.exp(-2.0))
    assert lower_bound_at_horizon(1.0, 3.0) == pytest.approx(-4.0)


def test_crossing_time():
    grid = np.array([0.0, 1.0, 2.0])
    assert crossing_time(grid, np.array([0.0, 0.5, 1.5])) == pytest.approx(1.5)
    assert crossing_time(grid, np.array([1.2, 1.5, 2.0])) == 0.0
    assert crossing_time(grid, np.array([0.0, 0.2, 0.4])) is None


def test_control_library():
    library = control_library(12, 10.0, seed=0)
    assert len(library) == 12
    assert library[0].at(3.0)[0] == 0.0 and library[1].at(3.0)[0] == 1.0
    for u in library:
        assert u.is_admissible(bolza_example({}).control_set)
    again = control_library(12, 10.0, seed=0)
    for u, v in zip(library, again, strict=True):
        np.testing.assert_array_equal(u.to_rows(), v.to_rows())


def test_sensitivity_table():
    rows = sensitivity_table(bolza_example({}), (1.0, 5.0, 10.0), 1e-8, IntegratorConfig())
    assert [row.T for row in rows] == [1.0, 5.0, 10.0]
    assert all(row.passed for row in rows)
    assert rows[0].computed == pytest.approx(-2.16166179, abs=1e-8)


def test_inequality_checks():
    checks = inequality_checks((-1.0, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0))
    assert len(checks) == 14
    assert all(c.passed for c in checks)


def test_eta_checks():
    checks = eta_checks(1e-9)
    assert all(c.passed for c in checks)
    assert checks[0].value == pytest.approx(0.688482, abs=1e-6)


def test_trajectory_checks():
    fine = IntegratorConfig(step=1e-3)
    checks = trajectory_checks(bolza_example({}), (1.0, 3.0), 3.0, 1e-6, fine)
    assert len(checks) == 2
    assert all(c.passed for c in checks), [c.value for c in checks]


def test_large_initial_state_costs_more():
    p = bolza_example({})
    traj = integrate_state(p, np.array([2.0]), ControlSignal.constant(1.0), 5.0)
    assert float(traj.final_cost) > 0.0


def test_overtaking_gap_probe():
    p = bolza_example({})
    library = control_library(6, 10.0, seed=0)
    rows = overtaking_gap_probe(
        p,
        (10.0, 5.0),
        np.linspace(-1.0, 2.0, 7),
        library,
        IntegratorConfig(),
        IntegratorConfig(step=1e-3),
        chunk_size=4,
    )
    assert [row.T for row in rows] == [5.0, 10.0]
    for row in rows:
        assert row.min_J >= WORST_CASE_BOUND
        assert row.reference_J == 0.0
        assert row.monotone
        assert row.passed
        assert row.bound_crossing <= row.min_J + 1e-3
        if row.bound_horizon is not None:
            assert row.crossing_time + 2 <= row.T


def test_ak_failure_demo():
    config = BolzaExampleConfig(sweep_horizons="geometric:1:2:6")
    demo = ak_failure_demo(bolza_example({}), config)
    assert demo.I_star == pytest.approx(-2.5, abs=1e-5)
    assert not demo.pmp_verdicts["ak"].passed
    assert not demo.pmp_verdicts["ak"].verdicts["max_condition"]
    assert demo.pmp_verdicts["true"].passed
    for sample in demo.ak_candidate:
        assert sample.computed == pytest.approx(2.5 * np.exp(-2 * sample.t), abs=1e-6)
    assert all(s.passed for s in demo.psi_true)
    assert all(s.passed for s in demo.uniqueness)
    assert {s.lam for s in demo.uniqueness} == set(config.uniqueness_lambdas)


@pytest.mark.slow
def test_run_example_and_artifacts(tmp_path: Path):
    report = run_example(BolzaExampleConfig(**SMALL_RUN))
    assert report.passed, [c.name for c in report.bound_checks if not c.passed]
    assert len(report.gap_table) == 2

    write_artifacts(report, tmp_path)
    assert (tmp_path / "report.json").exists()
    lines = (tmp_path / "series.csv").read_text().splitlines()
    assert lines[0] == "t,psi_true,psi_ak,residual_true,residual_ak"
    assert len(lines) == len(report.pmp_verdicts["true"].profile_t) + 1


@pytest.mark.slow
def test_main_writes_final_config(tmp_path: Path):
    main(BolzaExampleConfig(out_dir=tmp_path, **SMALL_RUN))
    assert (tmp_path / "report.json").exists()
    assert (tmp_path / "final_config.yaml").exists()
