from collections.abc import Callable

import numpy as np
import pytest

from ihpmp.control_metric import (
    ContextRangeError,
    MetricConfig,
    MetricContext,
    build_context,
    control_class,
    divergence_trials,
    extended_field,
    extended_initial_box,
    pullback_kappa,
    r_a,
    rho,
    rho_profile,
    verify_divergence_bound,
    w,
)
from ihpmp.experiments.bolza.oracles import control_library
from ihpmp.integrate import integrate_field
from ihpmp.problems.base import Box, ControlSet, ControlSignal, VectorField
from ihpmp.problems.registry import bolza_example

ZERO = ControlSignal.constant(0.0)
ONE = ControlSignal.constant(1.0)
UNIT = Box([-1.0], [1.0])


def scalar_field(rhs: Callable[[np.ndarray, np.ndarray, float], np.ndarray]) -> VectorField:
    return VectorField(dim=1, control_dim=1, rhs=rhs, control_set=ControlSet(Box([-4.0], [4.0])))


# dy/dt = 0, dy/dt = y and dy/dt = y + u
STILL = scalar_field(lambda y, u, t: np.zeros(np.broadcast_shapes(np.shape(y), np.shape(u))))
GROWTH = scalar_field(lambda y, u, t: np.asarray(y) + 0.0 * np.asarray(u))
DRIVEN = scalar_field(lambda y, u, t: np.asarray(y) + np.asarray(u))


def context(field: VectorField, horizon: float = 2.0, **config) -> MetricContext:
    return build_context(field, ZERO, UNIT, horizon, MetricConfig(**config))


def random_signal(rng: np.random.Generator, T: float) -> ControlSignal:
    times = np.sort(rng.uniform(0.0, T, size=3))
    return ControlSignal.piecewise(times.tolist(), rng.uniform(-2.0, 2.0, size=4).tolist())


def test_control_class():
    assert control_class([0.0]) == 1
    assert control_class([1.0]) == 1
    assert control_class([-1.5]) == 2
    assert control_class([3.0, 4.0]) == 5


def test_still_field_context():
    ctx = context(STILL)
    assert len(ctx.boxes) == 2
    for box in ctx.boxes:
        np.testing.assert_allclose(box.lo, [-1.25])
        np.testing.assert_allclose(box.hi, [1.25])
    np.testing.assert_array_equal(ctx.lipschitz, 0.0)
    assert ctx.weight(1.5) == 0.0
    assert r_a(ctx, 2, 1.0) == 0.0


def test_growth_field_context():
    ctx = context(GROWTH)
    assert bool(ctx.boxes[0].contains([-np.e])) and bool(ctx.boxes[0].contains([np.e]))
    assert np.all(ctx.lipschitz >= 1.0)
    weights = [ctx.weight(t) for t in np.linspace(0.0, 2.0, 9)]
    assert weights[0] == 0.0
    assert np.all(np.diff(weights) >= 0)
    assert ctx.weight(1.0) == pytest.approx(1.25, rel=1e-6)


def test_exponential_weight():
    ctx = context(GROWTH, weight="exponential")
    assert ctx.weight(0.0) == 1.0
    assert ctx.weight(1.0) == pytest.approx(np.exp(1.25), rel=1e-6)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_r_a_of_control_driven_field(k: int):
    ctx = context(DRIVEN)
    for t in (0.3, 1.0, 1.7):
        assert r_a(ctx, k, t) == pytest.approx(2 * k * ctx.weight(t), rel=1e-9)
    assert r_a(ctx, k, 1.0) <= r_a(ctx, min(k + 1, 4), 1.0)


def test_w_is_ultrametric():
    ctx = context(DRIVEN)
    rng = np.random.default_rng(0)
    for _ in range(50):
        u, v, z = rng.uniform(-4.0, 4.0, size=(3, 1))
        t = float(rng.uniform(0.0, 2.0))
        assert w(ctx, u, v, t) <= max(w(ctx, u, z, t), w(ctx, z, v, t))
        assert w(ctx, u, v, t) == w(ctx, v, u, t)
    assert w(ctx, [0.5], [0.5], 1.0) == 0.0


def test_rho_vanishes_on_equal_controls():
    ctx = context(DRIVEN)
    u = ControlSignal.piecewise([0.4, 1.1], [0.5, -1.0, 2.0])
    value = rho(ctx, u, u, 2.0)
    assert value.value == 0.0
    assert value.disagreement == 0.0


def test_rho_on_early_disagreement():
    ctx = context(DRIVEN)
    v = ControlSignal.piecewise([0.5], [1.0, 0.0])
    value = rho(ctx, ZERO, v, 2.0)
    assert value.disagreement == pytest.approx(0.5)
    assert value.value >= 0.5
    # w = ceil(2.5 t): 1 until t = 0.4, then 2
    assert value.value == pytest.approx(0.6, rel=1e-6)


def test_rho_follows_the_literal_ceiling():
    ctx = context(STILL)
    value = rho(ctx, ZERO, ONE, 1.0)
    assert value.value == 0.0
    assert value.disagreement == pytest.approx(1.0)


def test_rho_metric_axioms():
    ctx = context(DRIVEN)
    rng = np.random.default_rng(1)
    for _ in range(10):
        u, v, z = (random_signal(rng, 2.0) for _ in range(3))
        uv, vu = rho(ctx, u, v, 2.0), rho(ctx, v, u, 2.0)
        assert uv.value == vu.value
        assert uv.value <= rho(ctx, u, z, 2.0).value + rho(ctx, z, v, 2.0).value + 1e-12
        assert uv.value >= uv.disagreement
        assert uv.value > 0.0


def test_rho_profile_is_nondecreasing():
    ctx = context(DRIVEN)
    times = np.linspace(0.0, 2.0, 11)
    profile = rho_profile(ctx, ZERO, ControlSignal.piecewise([0.7], [0.0, 1.0]), times)
    assert profile[0] == 0.0
    assert np.all(np.diff(profile) >= 0)
    assert np.all(profile[:4] == 0.0)


def test_context_range_errors():
    ctx = context(DRIVEN)
    with pytest.raises(ContextRangeError):
        r_a(ctx, 5, 1.0)
    with pytest.raises(ContextRangeError):
        r_a(ctx, 1, 2.5)
    with pytest.raises(ContextRangeError):
        rho(ctx, ZERO, ControlSignal.constant(4.5), 1.0)


def test_pullback_kappa():
    ctx = context(GROWTH)
    np.testing.assert_allclose(pullback_kappa(ctx, np.array([np.e]), 1.0), [1.0], atol=1e-6)

    y0 = np.array([0.3])
    z = integrate_field(ctx.field, y0, ZERO, 0.0, 1.5).final_state
    np.testing.assert_allclose(pullback_kappa(ctx, z, 1.5), y0, atol=1e-6)

    still = context(STILL)
    np.testing.assert_array_equal(pullback_kappa(still, np.array([0.7]), 1.2), [0.7])


def test_divergence_bound_on_reference_control():
    ctx = context(DRIVEN)
    check = verify_divergence_bound(ctx, ZERO, [0.2], 1.5)
    assert check.guard_passed
    assert check.holds
    assert check.rho_T == 0.0
    assert abs(check.min_margin) <= 1e-8


def test_divergence_bound_on_still_field():
    ctx = context(STILL)
    check = verify_divergence_bound(ctx, ONE, [0.0], 1.0)
    assert check.guard_passed
    assert check.holds
    np.testing.assert_array_equal(check.margins, 0.0)


def test_divergence_bound_guard():
    ctx = context(DRIVEN)
    check = verify_divergence_bound(ctx, ONE, [0.9], 1.0)
    assert not check.guard_passed
    assert check.holds is None


def test_extended_field_of_example():
    field = extended_field(bolza_example({}))
    assert field.dim == 3
    np.testing.assert_allclose(field(np.array([0.0, 0.0, 1.0]), np.array([0.0]), 0.0), [0, -5, 0])
    box = extended_initial_box([0.0], 2.0)
    np.testing.assert_allclose(box.lo, [-2.0, -2.0, -2.0])


def test_example_context_builds():
    field = extended_field(bolza_example({}))
    ctx = build_context(field, ZERO, extended_initial_box([0.0]), 8.0)
    assert len(ctx.boxes) == 8
    assert np.all(np.isfinite(ctx.lipschitz))
    values = [r_a(ctx, k, 1.0) for k in range(1, 5)]
    assert values[0] >= 0.0
    assert np.all(np.diff(values) >= 0)
    summary = ctx.summary()
    assert len(summary.funnel) == 8
    assert len(summary.lipschitz) == 8 * 4


@pytest.mark.slow
def test_example_divergence_trials():
    field = extended_field(bolza_example({}))
    ctx = build_context(field, ZERO, extended_initial_box([0.0]), 2.0)
    report = divergence_trials(ctx, n_trials=50, T=1.0, seed=0)
    assert report.weight == "exponential"
    assert report.attempted == 50
    assert report.guarded > 0
    assert report.all_hold
    assert report.min_margin is not None and report.min_margin >= -1e-8


def test_with_weight_reuses_tables():
    ctx = context(GROWTH)
    exponential = ctx.with_weight("exponential")
    assert exponential.config.weight == "exponential"
    assert ctx.config.weight == "integral"
    assert ctx.with_weight("integral") is ctx
    np.testing.assert_array_equal(exponential.lipschitz, ctx.lipschitz)
    assert exponential.weight(1.0) == pytest.approx(np.exp(ctx.weight(1.0)))


def test_divergence_bound_needs_exponential_weight():
    # A hard push at t = 0 moves y by 4 (1 - e^{-t}) while the integral weight still rates it 1
    u = ControlSignal.piecewise([0.05], [4.0, 0.0])
    ctx = context(DRIVEN)
    integral = verify_divergence_bound(ctx, u, [0.0], 1.0)
    assert integral.guard_passed
    assert not integral.holds
    exponential = verify_divergence_bound(ctx.with_weight("exponential"), u, [0.0], 1.0)
    assert exponential.guard_passed
    assert exponential.holds
    assert exponential.min_margin >= 0.0


def test_divergence_trials_default_to_exponential_weight():
    report = divergence_trials(context(DRIVEN), n_trials=10, T=1.0, seed=0)
    assert report.weight == "exponential"
    assert report.guarded == 10
    assert report.all_hold
    assert report.min_margin is not None and report.min_margin >= -1e-8


def test_rho_axioms_on_example_library():
    field = extended_field(bolza_example({}))
    ctx = build_context(field, ZERO, extended_initial_box([0.0]), 2.0)
    library = control_library(40, 2.0, seed=0)
    rng = np.random.default_rng(2)
    for _ in range(100):
        i, j, k = rng.integers(0, len(library), size=3)
        u, v, z = library[i], library[j], library[k]
        uv, vu = rho(ctx, u, v, 2.0), rho(ctx, v, u, 2.0)
        assert uv.value == vu.value
        assert uv.value <= rho(ctx, u, z, 2.0).value + rho(ctx, z, v, 2.0).value + 1e-12
        assert uv.value >= uv.disagreement
        if uv.value == 0.0:
            assert uv.disagreement == 0.0
        t = float(rng.uniform(0.0, 2.0))
        cu, cv, cz = u.at(t), v.at(t), z.at(t)
        assert w(ctx, cu, cv, t) <= max(w(ctx, cu, cz, t), w(ctx, cz, cv, t))
        assert w(ctx, cu, cv, t) == w(ctx, cv, cu, t)
