"""A control metric adapted to one reference control.

The construction works on a controlled field `dy/dt = a(y, u, t)` (usually the state-adjoint
extension of a problem) with a reference control `u*` and a box `S` of initial values:

- funnel boxes `G_n` bound every `u*`-trajectory from `S` over `[n-1, n]`;
- `L(t)` bounds the `y`-Lipschitz constant of `a(., u*(t), t)` over the funnel box, one value
  per cell of `1 / cells_per_unit` time units;
- the weight is `M(t) = int_0^t L`, or `exp(int_0^t L)` with `weight="exponential"`;
- `r_a(k, t) = M(t) sup ||a(y,u,t) - a(y,v,t)||` over `y` in the funnel box and controls of
  magnitude class at most `k`;
- `w(u, v, t) = ceil(r_a(max(class u, class v), t))` off the diagonal, and `rho` integrates it.

All suprema are sampled (corners, center and a Latin-hypercube sample) and inflated by the safety
factor where they bound the funnel and the Lipschitz constant; they are estimates, not certified
bounds.
"""

from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from jaxtyping import Float
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt

from ihpmp.integrate import IntegratorConfig, StatePath, integrate_field
from ihpmp.log import logger
from ihpmp.problems.base import (
    Box,
    ControlLike,
    ControlProblem,
    ControlSignal,
    VectorField,
    disagreement,
)
from ihpmp.types import Vector
from ihpmp.utils import as_vector, to_tuple

# Above this many integer crossings in one cell, the ceiling integral falls back to an upper bound
_MAX_CROSSINGS = 1_000_000


class ContextRangeError(ValueError):
    """A control class or time outside the range a `MetricContext` was built for."""


class MetricConfig(BaseModel):
    """Sampling sizes and the weight of a metric context.

    `verify_divergence_bound` is only guaranteed under `weight="exponential"`, where
    `M(0) = 1` and `M` dominates the growth factor of the `u*`-flow. The `integral` weight
    vanishes at 0 and can undercut the drift of a perturbed trajectory early on; use it for `rho`
    alone.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)
    funnel_samples: PositiveInt = 64
    lipschitz_samples: PositiveInt = 32
    control_samples: PositiveInt = Field(9, ge=2)
    cells_per_unit: PositiveInt = 4
    safety: float = Field(1.25, ge=1.0)
    k_max: PositiveInt = 4
    weight: Literal["integral", "exponential"] = "integral"
    seed: NonNegativeInt = 0


def extended_field(p: ControlProblem) -> VectorField:
    """The field of `(x, psi, lam)`: `x' = f`, `psi' = -psi df/dx + lam df0/dx`, `lam' = 0`."""
    m = p.state_dim

    def rhs(y: np.ndarray, u: np.ndarray, t: float | np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        x, psi, lam = y[..., :m], y[..., m : 2 * m], y[..., 2 * m :]
        F = p.dynamics_jac(x, u, t)
        psi_dot = -np.einsum("...i,...ij->...j", psi, F) + lam * p.cost_grad(x, u, t)
        x_dot = p.dynamics(x, u, t)
        x_dot, psi_dot = np.broadcast_arrays(x_dot, psi_dot)
        return np.concatenate([x_dot, psi_dot, np.zeros(x_dot.shape[:-1] + (1,))], axis=-1)

    return VectorField(dim=2 * m + 1, control_dim=p.control_dim, rhs=rhs, control_set=p.control_set)


def extended_initial_box(b_star: ArrayLike, radius: float = 2.0) -> Box:
    """Box enclosing the ball of `radius` about `(b*, 0, 0)` in the extended space."""
    b_star = np.atleast_1d(np.asarray(b_star, dtype=float))
    return Box.around(np.concatenate([b_star, np.zeros(b_star.shape[0] + 1)]), radius)


def control_class(u: ArrayLike) -> int:
    """Least natural number not below the Euclidean norm of `u`, and at least 1."""
    norm = float(np.linalg.norm(np.atleast_1d(np.asarray(u, dtype=float))))
    return max(1, int(np.ceil(norm - 1e-12)))


class BoxRow(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    n: int
    lo: Vector
    hi: Vector


class LipschitzRow(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    t_start: float
    t_end: float
    L: float
    weight_end: float


class ContextSummary(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    horizon: float
    config: MetricConfig
    initial_box: BoxRow
    funnel: list[BoxRow]
    lipschitz: list[LipschitzRow]
    spread: list[list[float]]


@dataclass(frozen=True)
class MetricContext:
    """Immutable tables of one metric construction.

    `lipschitz[c]` and `spread[k-1, c]` apply on cell `c`, i.e. `[c h, (c+1) h)` with
    `h = 1 / cells_per_unit`. `weight_edges[c]` is the integral weight `int_0^{c h} L`.
    """

    field: VectorField
    u_star: ControlLike
    initial_box: Box
    horizon: float
    config: MetricConfig
    boxes: tuple[Box, ...]
    lipschitz: Float[np.ndarray, " C"]
    weight_edges: Float[np.ndarray, " C+1"]
    spread: Float[np.ndarray, "K C"]
    funnel: StatePath

    @property
    def cell_width(self) -> float:
        return 1.0 / self.config.cells_per_unit

    @property
    def n_cells(self) -> int:
        return self.lipschitz.shape[0]

    def _check_time(self, t: float) -> None:
        if not 0.0 <= t <= self.horizon + 1e-12:
            raise ContextRangeError(f"t={t} is outside the context horizon [0, {self.horizon}]")

    def cell_of(self, t: float) -> int:
        self._check_time(t)
        return min(int(np.floor(t * self.config.cells_per_unit)), self.n_cells - 1)

    def box_at(self, t: float) -> Box:
        """Funnel box covering time `t`."""
        return self.boxes[self.cell_of(t) // self.config.cells_per_unit]

    def integral_weight(self, t: float) -> float:
        c = self.cell_of(t)
        return float(self.weight_edges[c] + self.lipschitz[c] * (t - c * self.cell_width))

    def weight(self, t: float) -> float:
        """`M(t)`."""
        m = self.integral_weight(t)
        if self.config.weight == "exponential":
            with np.errstate(over="ignore"):
                return float(np.exp(m))
        return m

    def with_weight(self, weight: Literal["integral", "exponential"]) -> "MetricContext":
        """The same tables read with another weight; nothing is recomputed."""
        if weight == self.config.weight:
            return self
        return replace(self, config=self.config.model_copy(update={"weight": weight}))

    def summary(self) -> ContextSummary:
        edges = np.arange(self.n_cells + 1) * self.cell_width
        return ContextSummary(
            horizon=self.horizon,
            config=self.config,
            initial_box=BoxRow(
                n=0, lo=to_tuple(self.initial_box.lo), hi=to_tuple(self.initial_box.hi)
            ),
            funnel=[
                BoxRow(n=i + 1, lo=to_tuple(b.lo), hi=to_tuple(b.hi))
                for i, b in enumerate(self.boxes)
            ],
            lipschitz=[
                LipschitzRow(
                    t_start=float(edges[c]),
                    t_end=float(edges[c + 1]),
                    L=float(self.lipschitz[c]),
                    weight_end=self.weight(float(edges[c + 1])),
                )
                for c in range(self.n_cells)
            ],
            spread=[to_tuple(row) for row in self.spread],
        )


def _control_samples(box: Box, k: int, per_axis: int) -> np.ndarray:
    """Grid points of `box` intersected with `[-k, k]^d` whose class is at most `k`."""
    lo, hi = np.maximum(box.lo, -k), np.minimum(box.hi, k)
    if np.any(lo > hi):
        return np.empty((0, box.dim))
    axes = np.meshgrid(*(np.linspace(a, b, per_axis) for a, b in zip(lo, hi, strict=True)))
    pts = np.stack([a.ravel() for a in axes], axis=-1)
    return pts[np.linalg.norm(pts, axis=-1) <= k + 1e-12]


def _cell_times(c: int, h: float) -> tuple[float, float, float]:
    return c * h, (c + 0.5) * h, (c + 1) * h


def build_context(
    field: VectorField,
    u_star: ControlLike,
    initial_box: Box,
    horizon: float,
    config: MetricConfig | None = None,
    integrator: IntegratorConfig | None = None,
) -> MetricContext:
    """Funnel boxes, Lipschitz table, weight and control spreads up to `ceil(horizon)`.

    Raises:
        IntegrationError: If a funnel trajectory blows up before the horizon.
    """
    assert horizon > 0, f"Horizon must be positive, got {horizon}"
    assert initial_box.dim == field.dim, (
        f"Initial box has dim {initial_box.dim}, field has dim {field.dim}"
    )
    config = config or MetricConfig()
    n_units = int(np.ceil(horizon - 1e-12))
    cpu = config.cells_per_unit
    h = 1.0 / cpu
    n_cells = n_units * cpu
    logger.info(
        f"Building metric context: dim={field.dim}, horizon={n_units}, "
        f"{config.funnel_samples} funnel samples, weight={config.weight}"
    )

    starts = initial_box.probe_points(config.funnel_samples, config.seed)
    edges = np.arange(n_cells + 1) * h
    funnel = integrate_field(field, starts, u_star, 0.0, float(n_units), integrator, edges[1:])

    boxes = []
    for n in range(n_units):
        in_unit = (funnel.grid >= n - 1e-12) & (funnel.grid <= n + 1 + 1e-12)
        states = funnel.states[in_unit].reshape(-1, field.dim)
        boxes.append(Box(states.min(axis=0), states.max(axis=0)).inflate(config.safety))

    lipschitz = np.zeros(n_cells)
    spread = np.zeros((config.k_max, n_cells))
    for c in range(n_cells):
        box = boxes[c // cpu]
        ys = box.probe_points(config.lipschitz_samples, config.seed)
        start, mid, end = _cell_times(c, h)
        for t, t_ctrl in ((start, start), (mid, mid), (end, mid)):
            jac = field.jacobian(ys, u_star.at(t_ctrl), t)
            norm = float(np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1))))
            lipschitz[c] = max(lipschitz[c], config.safety * norm)
            for k in range(1, config.k_max + 1):
                us = _control_samples(field.control_set.at(t_ctrl), k, config.control_samples)
                if us.shape[0] < 2:
                    continue
                a = field(ys[:, None, :], us[None, :, :], t)
                gaps = np.linalg.norm(a[:, :, None, :] - a[:, None, :, :], axis=-1)
                spread[k - 1, c] = max(spread[k - 1, c], float(np.max(gaps)))
    # Sup over nested control sets
    spread = np.maximum.accumulate(spread, axis=0)
    weight_edges = np.concatenate([[0.0], np.cumsum(lipschitz * h)])
    if not np.all(np.isfinite(lipschitz)):
        logger.warning("Non-finite Lipschitz estimates in the metric context")
    return MetricContext(
        field=field,
        u_star=u_star,
        initial_box=initial_box,
        horizon=float(n_units),
        config=config,
        boxes=tuple(boxes),
        lipschitz=lipschitz,
        weight_edges=weight_edges,
        spread=spread,
        funnel=funnel,
    )


def _check_class(ctx: MetricContext, k: int) -> None:
    if not 1 <= k <= ctx.config.k_max:
        raise ContextRangeError(
            f"Control class {k} is outside the computed range 1..{ctx.config.k_max}"
        )


def r_a(ctx: MetricContext, k: int, t: float) -> float:
    """`M(t)` times the sampled spread of `a` over controls of class at most `k`."""
    _check_class(ctx, k)
    spread = float(ctx.spread[k - 1, ctx.cell_of(t)])
    return ctx.weight(t) * spread if spread > 0 else 0.0


def w(ctx: MetricContext, u: ArrayLike, v: ArrayLike, t: float) -> float:
    """Pointwise ultrametric between control values at time `t`.

    Off the diagonal this is `ceil(r_a(k, t))` with `k = max(class u, class v)`: the pair is
    rated by the larger of the two magnitude classes (the max-class reading). Equal values
    are at distance 0.
    """
    u, v = np.atleast_1d(np.asarray(u, dtype=float)), np.atleast_1d(np.asarray(v, dtype=float))
    if np.array_equal(u, v):
        return 0.0
    return float(np.ceil(r_a(ctx, max(control_class(u), control_class(v)), t)))


def _ceil_integral_linear(alpha: float, beta: float, length: float) -> float:
    """`int_0^length ceil(alpha + beta s) ds` for `alpha, beta >= 0`, in closed form."""
    if beta == 0.0:
        return float(np.ceil(alpha)) * length
    first = np.floor(alpha) + 1.0
    last = np.ceil(alpha + beta * length)
    if last <= first:
        return first * length
    # Values first..last on pieces cut at the integer crossings alpha + beta s = j
    head = first * (first - alpha) / beta
    middle = (last - 1.0 - first) * (first + last) / 2.0 / beta
    tail = last * (length - (last - 1.0 - alpha) / beta)
    return float(head + middle + tail)


def _ceil_integral_exponential(scale: float, m_a: float, slope: float, length: float) -> float:
    """`int_0^length ceil(scale exp(m_a + slope s)) ds`."""
    with np.errstate(over="ignore"):
        phi_a, phi_b = scale * np.exp(m_a), scale * np.exp(m_a + slope * length)
    if not np.isfinite(phi_b):
        return float("inf")
    if slope == 0.0 or scale == 0.0:
        return float(np.ceil(phi_a)) * length
    first, last = np.floor(phi_a) + 1.0, np.ceil(phi_b)
    if last <= first:
        return float(first * length)
    if last - first > _MAX_CROSSINGS:
        logger.warning("Too many ceiling steps in one cell; using the upper bound phi + 1")
        return float((phi_b - phi_a) / slope + length)
    levels = np.arange(first, last + 1.0)
    cuts = (np.log(levels[:-1] / scale) - m_a) / slope
    bounds = np.concatenate([[0.0], np.clip(cuts, 0.0, length), [length]])
    return float(np.sum(levels * np.diff(bounds)))


def _w_integral(ctx: MetricContext, k: int, a: float, b: float) -> float:
    """`int_a^b ceil(r_a(k, t)) dt` with `[a, b]` inside one cell."""
    c = ctx.cell_of(0.5 * (a + b))
    spread = float(ctx.spread[k - 1, c])
    if spread == 0.0:
        return 0.0
    m_a = ctx.integral_weight(a)
    if ctx.config.weight == "exponential":
        return _ceil_integral_exponential(spread, m_a, float(ctx.lipschitz[c]), b - a)
    return _ceil_integral_linear(spread * m_a, spread * float(ctx.lipschitz[c]), b - a)


class RhoValue(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    value: float
    T: float
    disagreement: float


def rho_profile(
    ctx: MetricContext, u: ControlLike, v: ControlLike, times: Sequence[float]
) -> Float[np.ndarray, " n"]:
    """`rho(u, v, t)` at each of the sorted `times`, integrated piece by piece."""
    times = np.asarray(times, dtype=float)
    assert np.all(np.diff(times) >= 0), "times must be sorted"
    if times.size == 0:
        return np.empty(0)
    T = float(times[-1])
    ctx._check_time(T)
    edges = np.arange(1, ctx.n_cells) * ctx.cell_width
    knots = np.unique(
        np.concatenate(
            [[0.0, T], times, u.breakpoints(0.0, T), v.breakpoints(0.0, T), edges[edges < T]]
        )
    )
    cumulative = np.zeros(knots.shape[0])
    for i, (a, b) in enumerate(zip(knots[:-1], knots[1:], strict=True)):
        mid = 0.5 * (a + b)
        cu, cv = np.atleast_1d(u.at(mid)), np.atleast_1d(v.at(mid))
        piece = 0.0
        if not np.array_equal(cu, cv):
            k = max(control_class(cu), control_class(cv))
            _check_class(ctx, k)
            piece = _w_integral(ctx, k, float(a), float(b))
        cumulative[i + 1] = cumulative[i] + piece
    return cumulative[np.searchsorted(knots, times)]


def rho(ctx: MetricContext, u: ControlSignal, v: ControlSignal, T: float) -> RhoValue:
    """`rho(u, v, T) = int_0^T w(u(t), v(t), t) dt`, with the disagreement measure alongside."""
    assert T >= 0, f"T must be nonnegative, got {T}"
    value = float(rho_profile(ctx, u, v, [T])[0]) if T > 0 else 0.0
    return RhoValue(value=value, T=T, disagreement=disagreement(u, v, T))


def pullback_kappa(
    ctx: MetricContext,
    z: Float[np.ndarray, "... n"],
    theta: float,
    integrator: IntegratorConfig | None = None,
) -> Float[np.ndarray, "... n"]:
    """Initial value of the `u*`-trajectory passing through `z` at time `theta`."""
    ctx._check_time(theta)
    z = np.asarray(z, dtype=float)
    if theta == 0.0:
        return z.copy()
    return integrate_field(ctx.field, z, ctx.u_star, theta, 0.0, integrator).final_state


class DivergenceCheck(BaseModel):
    """Outcome of the trajectory-divergence bound for one control and initial value."""

    model_config = ConfigDict(extra="forbid", frozen=True)
    y0: Vector
    T: float
    rho_T: float
    boundary_distance: float
    guard_passed: bool
    holds: bool | None = None
    min_margin: float | None = None
    times: tuple[float, ...] = ()
    margins: tuple[float, ...] = ()


def verify_divergence_bound(
    ctx: MetricContext,
    u: ControlSignal,
    y0: ArrayLike,
    T: float,
    n_times: int = 33,
    tol: float = 1e-8,
    integrator: IntegratorConfig | None = None,
) -> DivergenceCheck:
    """Check `||kappa(y(t), t) - y(0)|| <= rho(u*, u, t)` along the `u`-trajectory from `y0`.

    The check only runs when `rho(u*, u, T)` is below the distance from `y0` to the boundary of
    the initial box; otherwise the result is reported with `guard_passed=False`. The bound is
    guaranteed for a context read with `weight="exponential"` only.
    """
    y0 = as_vector(y0, ctx.field.dim, "y0")
    if not bool(ctx.initial_box.contains(y0)):
        raise ValueError(f"y0={y0} is not in the initial box")
    assert T > 0, f"T must be positive, got {T}"
    times = np.linspace(0.0, T, n_times)
    rhos = rho_profile(ctx, ctx.u_star, u, times)
    distance = ctx.initial_box.distance_to_boundary(y0)
    if not rhos[-1] < distance:
        return DivergenceCheck(
            y0=to_tuple(y0),
            T=T,
            rho_T=float(rhos[-1]),
            boundary_distance=distance,
            guard_passed=False,
        )

    path = integrate_field(ctx.field, y0, u, 0.0, T, integrator, times[1:])
    drift = np.array(
        [np.linalg.norm(pullback_kappa(ctx, path.state_at(t), t, integrator) - y0) for t in times]
    )
    margins = rhos - drift
    holds = bool(np.all(margins >= -tol))
    if not holds:
        logger.warning(f"Divergence bound violated from y0={y0}: min margin {margins.min():.3e}")
    return DivergenceCheck(
        y0=to_tuple(y0),
        T=T,
        rho_T=float(rhos[-1]),
        boundary_distance=distance,
        guard_passed=True,
        holds=holds,
        min_margin=float(margins.min()),
        times=to_tuple(times),
        margins=to_tuple(margins),
    )


class TrialsReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    weight: Literal["integral", "exponential"]
    attempted: int
    guarded: int
    all_hold: bool
    min_margin: float | None
    checks: list[DivergenceCheck]


def window_control(
    u_star: ControlSignal, start: float, stop: float, value: ArrayLike
) -> ControlSignal:
    """`u*` with `value` on `[start, stop)`."""
    return u_star.replace_window(start, stop, value)


def divergence_trials(
    ctx: MetricContext,
    n_trials: int = 50,
    T: float = 1.0,
    seed: int = 0,
    max_halvings: int = 30,
    integrator: IntegratorConfig | None = None,
    weight: Literal["integral", "exponential"] = "exponential",
) -> TrialsReport:
    """Random window perturbations of `u*` from random interior points of the initial box.

    Each trial draws `y0`, a window and a control value, then shrinks the window towards 0 until
    the guard passes (or gives up after `max_halvings`). The trials read `ctx` with `weight`,
    the exponential one by default.
    """
    ctx = ctx.with_weight(weight)
    if weight != "exponential":
        logger.warning("Divergence trials under the integral weight may violate the bound")
    assert isinstance(ctx.u_star, ControlSignal), "trials perturb a ControlSignal reference"
    rng = np.random.default_rng(seed)
    starts = ctx.initial_box.inflate(0.5).sample(n_trials, seed)
    checks = []
    for i in range(n_trials):
        start = float(rng.uniform(0.0, 0.5 * T))
        length = float(rng.uniform(0.05, 0.5)) * T
        box = ctx.field.control_set.at(start)
        value = box.lo + rng.uniform(size=box.dim) * (box.hi - box.lo)
        check = None
        for _ in range(max_halvings + 1):
            u = window_control(ctx.u_star, start, start + length, value)
            check = verify_divergence_bound(ctx, u, starts[i], T, integrator=integrator)
            if check.guard_passed:
                break
            start, length = 0.5 * start, 0.5 * length
        assert check is not None
        checks.append(check)

    guarded = [c for c in checks if c.guard_passed]
    margins = [c.min_margin for c in guarded if c.min_margin is not None]
    if len(guarded) < n_trials:
        logger.warning(f"{n_trials - len(guarded)} of {n_trials} trials never passed the guard")
    return TrialsReport(
        weight=weight,
        attempted=n_trials,
        guarded=len(guarded),
        all_hold=all(c.holds for c in guarded),
        min_margin=min(margins) if margins else None,
        checks=checks,
    )
