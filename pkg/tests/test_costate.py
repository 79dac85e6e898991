import numpy as np
import pytest
from pydantic import ValidationError

from ihpmp.cones import NormalCone, transversality_distance
from ihpmp.costate import (
    CostateCandidate,
    HorizonSequence,
    InconclusiveReportError,
    SweepConfig,
    ak_costate,
    backward_shot,
    classify_candidate,
    classify_sequence,
    eval_1ss,
    gradients_at_infinity,
    horizon_sweep,
    joint_limit_probe,
)
from ihpmp.integrate import integrate_sensitivity
from ihpmp.problems.base import ControlProblem, ControlSignal
from ihpmp.problems.registry import bolza_example, lq_scalar, null_problem
from ihpmp.problems.spec import ProblemSpec, load_problem

ZERO = ControlSignal.constant(0.0)


def test_horizon_sequence_parse():
    tau = HorizonSequence.parse("geometric:1:2:5")
    assert tau.values == (1.0, 2.0, 4.0, 8.0, 16.0)
    assert tau.last == 16.0
    assert HorizonSequence.parse("list:1,3, 7").values == (1.0, 3.0, 7.0)
    assert HorizonSequence.parse([1, 2]).values == (1.0, 2.0)
    assert tau.shifted(2.0).values == (3.0, 4.0, 6.0, 10.0, 18.0)


@pytest.mark.parametrize("spec", ["geometric:1:0.5:4", "list:3,2,1", "arith:1:2", "list:"])
def test_horizon_sequence_rejects(spec: str):
    with pytest.raises((ValueError, ValidationError)):
        HorizonSequence.parse(spec)


def test_candidate_multipliers():
    with pytest.raises(ValidationError):
        CostateCandidate(lam=0.0, psi0=(0.0,))
    candidate = CostateCandidate(lam=1.0, psi0=(3.0, -4.0)).normalize()
    assert candidate.normalized
    assert candidate.lam == pytest.approx(1 / 6)
    np.testing.assert_allclose(candidate.psi0, [0.5, -2 / 3])


def test_backward_shot_bolza():
    tau = 5.0
    shot = backward_shot(bolza_example({}), 0.0, ZERO, 1.0, tau, shot_index=0)
    assert shot.candidate is not None
    assert shot.candidate.provenance == "backward-shot"
    np.testing.assert_allclose(shot.psi0, [2.5 * (1 - np.exp(-2 * tau))], atol=1e-8)
    np.testing.assert_allclose(shot.path.psi_at(0.0), shot.psi0, atol=1e-8)
    assert shot.terminal_residual < 1e-8


def test_backward_shot_lq():
    shot = backward_shot(lq_scalar({"a": 0.0}), 1.0, ZERO, 1.0, 1.0)
    np.testing.assert_allclose(shot.psi0, [-2.0], atol=1e-8)


def test_backward_shot_degenerate():
    shot = backward_shot(lq_scalar({}), 1.0, ZERO, 0.0, 1.0)
    assert shot.degenerate
    assert shot.candidate is None
    np.testing.assert_array_equal(shot.psi0, [0.0])


def test_sweep_bolza_normal_finite():
    p = bolza_example({})
    report = horizon_sweep(p, 0.0, ZERO, HorizonSequence.parse("geometric:1:2:7"))
    assert report.classification == "NormalFinite"
    assert report.limit_vector is not None
    np.testing.assert_allclose(report.limit_vector, [-2.5], atol=1e-6)
    assert len(report.table) == 7
    assert report.history[-1].classification == "NormalFinite"
    header, rows = report.to_rows()
    assert header[:3] == ["tau", "xi1", "I1"]
    assert rows.shape == (7, len(header))


def test_sweep_lq_abnormal_unbounded():
    p = lq_scalar({"a": 1.0})
    report = horizon_sweep(p, 1.0, ZERO, HorizonSequence.parse("list:8,9,10,11,12"))
    assert report.classification == "AbnormalUnbounded"
    np.testing.assert_allclose(report.limit_vector, [1.0])

    cone = NormalCone.at(p.initial_set, [1.0])
    verdict = classify_candidate(report, p.l_subgradients(np.array([1.0])), cone)
    assert verdict.candidate.lam == 0.0
    np.testing.assert_allclose(verdict.candidate.psi0, [-1.0])
    assert not verdict.transversality_holds


def test_sweep_null_problem():
    report = horizon_sweep(null_problem({}), 0.0, ZERO, HorizonSequence.geometric(1.0, 2.0, 4))
    assert report.classification == "NormalFinite"
    np.testing.assert_array_equal(report.limit_vector, [0.0])


def test_sweep_with_schedule_reports_gaps():
    p = bolza_example({})
    tau = HorizonSequence.parse("geometric:1:2:6")
    schedule = [[-(2.0**-n)] for n in range(len(tau))]
    report = horizon_sweep(p, 0.0, ZERO, tau, xi_schedule=schedule)
    assert all(row.j_gap is not None and row.ratio_641 is not None for row in report.table)
    # xi < 0 stays put, so I(xi; tau) = (xi^4 - 1) * 5/2 (1 - e^{-2 tau})
    row = report.table[2]
    expected = (row.xi[0] ** 4 - 1) * 2.5 * (1 - np.exp(-2 * row.tau))
    np.testing.assert_allclose(row.I, [expected], atol=1e-8)
    assert report.table[-1].j_gap < report.table[0].j_gap


def test_classify_candidate_bolza_fails_transversality():
    p = bolza_example({})
    report = horizon_sweep(p, 0.0, ZERO, HorizonSequence.parse("geometric:1:2:7"))
    cone = NormalCone.at(p.initial_set, [0.0])
    assert cone.is_trivial
    verdict = classify_candidate(report, p.l_subgradients(np.array([0.0])), cone)
    np.testing.assert_allclose(verdict.raw_candidate.psi0, [2.5], atol=1e-6)
    assert verdict.raw_candidate.lam == 1.0
    assert verdict.candidate.normalized
    assert verdict.candidate.lam + abs(verdict.candidate.psi0[0]) == pytest.approx(1.0)
    assert verdict.transversality_distance == pytest.approx(2.5 / 3.5, abs=1e-6)
    assert not verdict.transversality_holds


def test_inconclusive_sequences():
    config = SweepConfig()
    alternating = np.array([[1.0], [-1.0]] * 3)
    assert classify_sequence(alternating, config).classification == "Inconclusive"
    assert classify_sequence(np.ones((2, 1)), config).classification == "Inconclusive"

    p = lq_scalar({"a": 0.0})
    report = horizon_sweep(p, 0.5, ZERO, HorizonSequence.parse("list:1,2,3,4"))
    assert report.classification == "Inconclusive"
    with pytest.raises(InconclusiveReportError):
        classify_candidate(report, np.zeros((1, 1)), NormalCone(activity=("interior",)))


def test_ak_costate_bolza():
    p = bolza_example({})
    tail = HorizonSequence.geometric(1.0, 2.0, 7)
    at_zero = ak_costate(p, 0.0, ZERO, 0.0, tail)
    assert at_zero.converged
    np.testing.assert_allclose(at_zero.psi, [2.5], atol=1e-6)

    at_one = ak_costate(p, 0.0, ZERO, 1.0, tail.shifted(1.0))
    assert at_one.converged
    np.testing.assert_allclose(at_one.psi, [0.33833821], atol=1e-6)


def test_ak_costate_divergent():
    tail = HorizonSequence.parse("list:8,10,12")
    result = ak_costate(lq_scalar({"a": 1.0}), 1.0, ZERO, 0.0, tail)
    assert result.verdict == "divergent"
    assert not result.converged


def test_eval_1ss():
    p = bolza_example({})
    np.testing.assert_allclose(eval_1ss(p, 0.0, ZERO, -2.5, 0.0), [2.5])
    np.testing.assert_allclose(eval_1ss(p, 0.0, ZERO, -2.5, 1.0), [0.33833821], atol=1e-8)


def test_joint_limit_holds_for_null_problem():
    report = joint_limit_probe(
        null_problem({}),
        0.0,
        ZERO,
        HorizonSequence.geometric(1.0, 2.0, 4),
        radii=(0.5, 0.25),
        samples_per_radius=4,
    )
    assert report.verdict == "I1-holds"
    np.testing.assert_array_equal(report.I_star, [0.0])
    assert len(report.samples) == 1 + 2 * 4


def test_joint_limit_fails_for_bolza():
    # I(xi; tau) still moves by about 5/2 r^4 at the smallest radius r
    report = joint_limit_probe(
        bolza_example({}),
        0.0,
        ZERO,
        HorizonSequence.geometric(1.0, 2.0, 4),
        radii=(0.5, 0.25),
        samples_per_radius=2,
    )
    assert report.verdict == "I1-fails"
    assert report.I_star is None


def test_gradients_at_infinity_null_problem():
    candidate = CostateCandidate(lam=1.0, psi0=(0.0,))
    result = gradients_at_infinity(
        null_problem({}),
        0.0,
        ZERO,
        HorizonSequence.geometric(1.0, 2.0, 4),
        radii=(0.5, 0.25),
        samples_per_radius=2,
        candidate=candidate,
    )
    assert result.status == "clusters found"
    assert len(result.proper) == 1
    np.testing.assert_array_equal(result.proper[0].centroid, [0.0])
    assert result.singular[0].centroid == (0.0,)
    assert result.candidate_consistent


def test_classify_candidate_carries_provenance():
    p = lq_scalar({"a": 1.0})
    report = horizon_sweep(p, 1.0, ZERO, HorizonSequence.parse("list:8,9,10,11,12"))
    cone = NormalCone.at(p.initial_set, [1.0])
    subgradients = p.l_subgradients(np.array([1.0]))
    assert classify_candidate(report, subgradients, cone).candidate.provenance == "backward-shot"
    verdict = classify_candidate(report, subgradients, cone, provenance="joint-limit")
    assert verdict.raw_candidate.provenance == "joint-limit"
    assert verdict.candidate.provenance == "joint-limit"


@pytest.mark.parametrize("c", [1e-3, 0.5, 3.0, 1e3])
def test_candidate_verdict_invariant_under_scaling(c: float):
    p = lq_scalar({"a": 1.0})
    report = horizon_sweep(p, 1.0, ZERO, HorizonSequence.parse("list:8,9,10,11,12"))
    cone = NormalCone.at(p.initial_set, [1.0])
    subgradients = p.l_subgradients(np.array([1.0]))
    base = classify_candidate(report, subgradients, cone)
    scaled_report = report.model_copy(update={"limit_vector": (c * report.limit_vector[0],)})
    scaled = classify_candidate(scaled_report, subgradients, cone)
    assert scaled.candidate == base.candidate
    assert scaled.transversality_holds == base.transversality_holds
    assert scaled.transversality_distance == pytest.approx(base.transversality_distance)

    for lam, psi0 in [(1.0, (2.5,)), (0.0, (2.0,)), (0.0, (-1.0,))]:
        one = CostateCandidate(lam=lam, psi0=psi0)
        many = CostateCandidate(lam=c * lam, psi0=(c * psi0[0],))
        assert many.normalize().lam == pytest.approx(one.normalize().lam)
        np.testing.assert_allclose(many.normalize().psi0, one.normalize().psi0)
        d_one = transversality_distance(one.psi0_array, one.lam, subgradients, cone)
        d_many = transversality_distance(many.psi0_array, many.lam, subgradients, cone)
        assert d_many == pytest.approx(c * d_one)
        assert (d_many <= 1e-6 * c) == (d_one <= 1e-6)


@pytest.mark.parametrize(
    "p, b_star, limit",
    [(bolza_example({}), 0.0, -2.5), (lq_scalar({"a": -1.0}), 0.5, 0.5)],
)
def test_refined_horizons_keep_normal_finite(p: ControlProblem, b_star: float, limit: float):
    coarse = horizon_sweep(p, b_star, ZERO, HorizonSequence.geometric(1.0, 2.0, 7))
    fine = horizon_sweep(p, b_star, ZERO, HorizonSequence.geometric(1.0, 2.0**0.5, 13))
    assert coarse.classification == fine.classification == "NormalFinite"
    np.testing.assert_allclose(coarse.limit_vector, [limit], atol=1e-6)
    np.testing.assert_allclose(fine.limit_vector, coarse.limit_vector, atol=1e-6)
    assert fine.history[-1].classification == "NormalFinite"


PLANAR = ProblemSpec(
    state_dim=2,
    control_dim=1,
    f=["x2", "-x1 - 0.5*x2 + u1"],
    f0="x1^2 + x1*x2",
    u_lo=[-1.0],
    u_hi=[1.0],
    c_lo=[-1.0, -1.0],
    c_hi=[1.0, 1.0],
)


@pytest.mark.parametrize(
    "p, xi",
    [(load_problem(PLANAR), (0.4, -0.3)), (null_problem({"m": 3}), (0.1, -0.2, 0.3))],
)
def test_backward_shot_matches_cauchy_formula(p: ControlProblem, xi: tuple[float, ...]):
    lam, tau, t = 0.7, 2.0, 1.0
    u = ControlSignal.piecewise([0.5], [1.0, -1.0])
    shot = backward_shot(p, xi, u, lam, tau)
    sens = integrate_sensitivity(p, np.array(xi), u, tau, checkpoints=[t])
    np.testing.assert_allclose(shot.psi0, -lam * sens.I_at(tau), atol=1e-12)
    np.testing.assert_array_equal(shot.path.psi_at(tau), np.zeros(p.state_dim))
    # psi(t) = lam * (I(t) - I(tau)) A_inv(t)
    expected = lam * (sens.I_at(t) - sens.I_at(tau)) @ sens.A_inv_at(t)
    np.testing.assert_allclose(shot.path.psi_at(t), expected, atol=1e-8)
    np.testing.assert_allclose(shot.path.psi_at(0.0), shot.psi0, atol=1e-8)
    assert shot.terminal_residual < 1e-8


@pytest.mark.parametrize(
    "p, b_star", [(bolza_example({}), 0.0), (lq_scalar({"a": -1.0}), 0.5)]
)
def test_ak_costate_agrees_with_eval_1ss(p: ControlProblem, b_star: float):
    for T in (0.5, 1.0, 2.0):
        tail = HorizonSequence.geometric(1.0, 2.0, 7).shifted(T)
        ak = ak_costate(p, b_star, ZERO, T, tail)
        assert ak.converged
        I_star = integrate_sensitivity(p, np.array([b_star]), ZERO, tail.last).I[-1]
        np.testing.assert_allclose(eval_1ss(p, b_star, ZERO, I_star, T), ak.psi, atol=1e-8)


def test_gradients_at_infinity_lq_unstable():
    # I(xi; tau) = xi (e^{2 tau} - 1) diverges for every xi near b* = 1
    candidate = CostateCandidate(lam=0.0, psi0=(-1.0,))
    result = gradients_at_infinity(
        lq_scalar({"a": 1.0}),
        1.0,
        ZERO,
        HorizonSequence.parse("list:8,9,10,11"),
        radii=(0.5, 0.25),
        samples_per_radius=2,
        candidate=candidate,
    )
    assert result.status == "empty at this budget"
    assert result.proper == []
    assert result.singular[0].centroid == (0.0,)
    assert any(c.centroid == pytest.approx((-1.0,)) for c in result.singular[1:])
    assert result.candidate_consistent


def test_gradients_at_infinity_bolza_ray():
    candidate = CostateCandidate(lam=1.0, psi0=(2.5,))
    result = gradients_at_infinity(
        bolza_example({}),
        0.0,
        ZERO,
        HorizonSequence.geometric(2.0, 2.0, 4),
        radii=(0.125, 0.0625),
        samples_per_radius=2,
        candidate=candidate,
    )
    assert result.status == "clusters found"
    assert any(
        abs(c.centroid[0] - 2.5) <= 1e-5 and c.horizons == (8.0, 16.0) for c in result.proper
    )
    assert result.singular[0].centroid == (0.0,)
    assert result.candidate_consistent


def test_joint_limit_fails_for_lq_without_drift():
    # I(xi; tau) = 2 xi tau spreads linearly in the horizon
    report = joint_limit_probe(
        lq_scalar({"a": 0.0}),
        0.0,
        ZERO,
        HorizonSequence.geometric(1.0, 2.0, 4),
        radii=(0.5, 0.25),
        samples_per_radius=2,
    )
    assert report.verdict == "I1-fails"
    assert report.I_star is None
    assert report.spread == pytest.approx(2 * 2 * 0.25 * 8.0, rel=1e-6)
    assert len(report.samples) == 1 + 2 * 2
