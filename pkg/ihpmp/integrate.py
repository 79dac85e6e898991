"""Finite-horizon integration of the state, cost, fundamental-matrix and adjoint dynamics.

Every quantity is carried as an extra component of one augmented ODE so that the state, the
accumulated cost `J`, the fundamental matrix `A`, its inverse and the sensitivity integral `I`
share a single discretisation. Control switch times (and any requested checkpoints) are knots of
the integration grid, so each step sees a constant control.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from itertools import pairwise
from pathlib import Path
from typing import Literal

import numpy as np
from jaxtyping import Float
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt
from scipy.integrate import solve_ivp

from ihpmp.problems.base import ControlLike, ControlProblem, VectorField, central_difference
from ihpmp.utils import save_csv

AugmentedRHS = Callable[[float, np.ndarray, np.ndarray], np.ndarray]

# Adaptive schemes, run segment by segment through scipy
_SCIPY_METHODS = {"dopri5": "RK45", "dop853": "DOP853"}


class IntegrationError(RuntimeError):
    """Step-size underflow, step budget exhaustion or a non-finite value at time `t`."""

    def __init__(self, t: float, reason: str):
        self.t = float(t)
        self.reason = reason
        super().__init__(f"Integration failed at t={self.t:.6g}: {reason}")


class IntegratorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    method: Literal["rk4", "dopri5", "dop853"] = "rk4"
    step: PositiveFloat = 1e-2
    rtol: PositiveFloat = 1e-10
    atol: PositiveFloat = 1e-12
    min_step: PositiveFloat = 1e-12
    max_steps: PositiveInt = 5_000_000

    def refined(self, factor: int = 2) -> "IntegratorConfig":
        """The same scheme at `factor` times the resolution."""
        return self.model_copy(
            update={
                "step": self.step / factor,
                "rtol": self.rtol / factor**4,
                "atol": self.atol / factor**4,
            }
        )


def integration_knots(
    t0: float, t1: float, control: ControlLike, checkpoints: Sequence[float] = ()
) -> np.ndarray:
    """Ordered knots from `t0` to `t1` (descending when integrating backwards)."""
    lo, hi = min(t0, t1), max(t0, t1)
    extra = np.asarray(checkpoints, dtype=float)
    inner = np.concatenate([control.breakpoints(lo, hi), extra[(extra > lo) & (extra < hi)]])
    knots = np.unique(np.concatenate([[lo, hi], inner]))
    # Drop knots closer than rounding noise so no segment is degenerate
    keep = np.concatenate([[True], np.diff(knots) > 1e-12 * max(1.0, hi)])
    keep[-1] = True
    knots = knots[keep]
    if knots.shape[0] > 2 and knots[-1] - knots[-2] <= 1e-12 * max(1.0, hi):
        knots = np.delete(knots, -2)
    return knots if t1 >= t0 else knots[::-1]


def _check_finite(y: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(y)):
        raise IntegrationError(t, "non-finite value (solution blow-up)")


def _rk4_segment(
    rhs: AugmentedRHS, y: np.ndarray, a: float, b: float, u: np.ndarray, n_cells: int
) -> tuple[list[float], list[np.ndarray]]:
    h = (b - a) / n_cells
    times, states = [], []
    for i in range(n_cells):
        t = a + i * h
        k1 = rhs(t, y, u)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1, u)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2, u)
        k4 = rhs(t + h, y + h * k3, u)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t_next = b if i == n_cells - 1 else a + (i + 1) * h
        _check_finite(y, t_next)
        times.append(t_next)
        states.append(y)
    return times, states


def _adaptive_segment(
    rhs: AugmentedRHS,
    y: np.ndarray,
    a: float,
    b: float,
    u: np.ndarray,
    config: IntegratorConfig,
    budget: int,
) -> tuple[list[float], list[np.ndarray]]:
    shape = y.shape

    def fun(t: float, z: np.ndarray) -> np.ndarray:
        return rhs(t, z.reshape(shape), u).reshape(-1)

    sol = solve_ivp(
        fun,
        (a, b),
        y.reshape(-1),
        method=_SCIPY_METHODS[config.method],
        rtol=config.rtol,
        atol=config.atol,
        first_step=min(config.step, abs(b - a)),
    )
    t_end = float(sol.t[-1])
    if sol.status != 0:
        raise IntegrationError(t_end, f"step size underflow ({sol.message})")
    n_steps = sol.t.shape[0] - 1
    if n_steps > budget:
        raise IntegrationError(t_end, f"step budget of {config.max_steps} exhausted")
    # The last step of a segment may be shortened to land on the knot
    if n_steps > 1 and np.min(np.abs(np.diff(sol.t[:-1]))) < config.min_step:
        raise IntegrationError(t_end, f"step size underflow (|h| < {config.min_step:g})")
    states = [z.reshape(shape) for z in sol.y.T[1:]]
    for t, z in zip(sol.t[1:], states, strict=True):
        _check_finite(z, float(t))
    times = [float(t) for t in sol.t[1:]]
    times[-1] = b
    return times, states


def solve(
    rhs: AugmentedRHS,
    y0: np.ndarray,
    t0: float,
    t1: float,
    control: ControlLike,
    config: IntegratorConfig,
    checkpoints: Sequence[float] = (),
    cells_multiple: int = 1,
) -> tuple[Float[np.ndarray, " n"], Float[np.ndarray, "n ..."]]:
    """Integrate `dy/dt = rhs(t, y, u)` from `t0` to `t1` (either direction).

    Args:
        rhs: Augmented right-hand side; `u` is the control on the current segment.
        y0: Initial value, any shape.
        control: Provides the piecewise-constant control and its switch times.
        config: Scheme and step control. `rk4` steps a fixed grid; `dopri5` and `dop853` hand
            each segment to `scipy.integrate.solve_ivp` (`RK45`, `DOP853`) with `rtol`/`atol`.
        checkpoints: Times that must appear in the output grid.
        cells_multiple: Split each segment into a multiple of this many equal `rk4` cells (used
            for composite quadrature over the grid). Above 1 this forces `rk4`.

    Returns:
        The output grid and the solution at every grid point, both starting at `t0`.

    Raises:
        IntegrationError: On step underflow, an exhausted step budget or a non-finite value.
    """
    assert cells_multiple >= 1, f"cells_multiple must be positive, got {cells_multiple}"
    y = np.asarray(y0, dtype=float)
    _check_finite(y, t0)
    times: list[float] = [float(t0)]
    states: list[np.ndarray] = [y]
    knots = integration_knots(t0, t1, control, checkpoints)
    steps = 0
    with np.errstate(all="ignore"):
        for a, b in pairwise(knots):
            u = control.at(0.5 * (a + b))
            if config.method == "rk4" or cells_multiple > 1:
                n_cells = max(1, int(np.ceil(abs(b - a) / config.step - 1e-9)))
                n_cells = cells_multiple * int(np.ceil(n_cells / cells_multiple))
                if steps + n_cells > config.max_steps:
                    raise IntegrationError(a, f"step budget of {config.max_steps} exhausted")
                seg_t, seg_y = _rk4_segment(rhs, states[-1], a, b, u, n_cells)
            else:
                seg_t, seg_y = _adaptive_segment(
                    rhs, states[-1], a, b, u, config, budget=config.max_steps - steps
                )
            steps += len(seg_t)
            times.extend(seg_t)
            states.extend(seg_y)
    return np.array(times), np.stack(states)


def _row_times(row: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Row vector times matrix over leading batch axes."""
    return np.einsum("...i,...ij->...j", row, mat)


def _nearest_index(grid: np.ndarray, t: float, what: str) -> int:
    idx = int(np.argmin(np.abs(grid - t)))
    assert abs(grid[idx] - t) <= 1e-9 * max(1.0, abs(t)), (
        f"t={t} is not a grid point of this {what}; pass it as a checkpoint"
    )
    return idx


@dataclass(frozen=True)
class StatePath:
    """States on an integration grid; `states` has shape `(n, ..., dim)`."""

    grid: Float[np.ndarray, " n"]
    states: Float[np.ndarray, "n ... m"]

    def index_of(self, t: float) -> int:
        return _nearest_index(self.grid, t, type(self).__name__)

    def state_at(self, t: float) -> np.ndarray:
        return self.states[self.index_of(t)]

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True)
class Trajectory(StatePath):
    """`x(b,u;.)` and the accumulated running cost `J(b,u;.)` on one grid."""

    running_cost: Float[np.ndarray, "n ..."]

    def cost_at(self, t: float) -> np.ndarray:
        return self.running_cost[self.index_of(t)]

    @property
    def final_cost(self) -> np.ndarray:
        return self.running_cost[-1]

    def to_csv(self, path: Path) -> Path:
        assert self.states.ndim == 2, "CSV export needs an unbatched trajectory"
        m = self.states.shape[-1]
        header = ["t", *(f"x{i + 1}" for i in range(m)), "J"]
        return save_csv(path, header, np.column_stack([self.grid, self.states, self.running_cost]))


@dataclass(frozen=True)
class SensitivityPath(Trajectory):
    """Fundamental matrix `A(xi;.)`, its inverse and the sensitivity integral `I(xi;.)`."""

    A: Float[np.ndarray, "n ... m m"]
    A_inv: Float[np.ndarray, "n ... m m"]
    I: Float[np.ndarray, "n ... m"]  # noqa: E741

    def I_at(self, t: float) -> np.ndarray:  # noqa: N802
        return self.I[self.index_of(t)]

    def A_inv_at(self, t: float) -> np.ndarray:
        return self.A_inv[self.index_of(t)]

    def inverse_defect(self) -> float:
        """Largest `||A A_inv - Id||` over the grid."""
        m = self.A.shape[-1]
        return float(np.max(np.abs(self.A @ self.A_inv - np.eye(m))))

    def to_csv(self, path: Path) -> Path:
        assert self.states.ndim == 2, "CSV export needs an unbatched path"
        m = self.states.shape[-1]
        header = [
            "t",
            *(f"x{i + 1}" for i in range(m)),
            "J",
            *(f"A{i + 1}{j + 1}" for i in range(m) for j in range(m)),
            *(f"I{i + 1}" for i in range(m)),
        ]
        n = self.grid.shape[0]
        rows = np.column_stack(
            [self.grid, self.states, self.running_cost, self.A.reshape(n, -1), self.I]
        )
        return save_csv(path, header, rows)


@dataclass(frozen=True)
class CovectorPath(StatePath):
    """Adjoint `psi` along the state it was integrated with; `lam` is the cost multiplier."""

    psi: Float[np.ndarray, "n m"]
    lam: float

    def psi_at(self, t: float) -> np.ndarray:
        return self.psi[self.index_of(t)]

    def to_csv(self, path: Path) -> Path:
        m = self.states.shape[-1]
        header = ["t", *(f"x{i + 1}" for i in range(m)), *(f"psi{i + 1}" for i in range(m))]
        return save_csv(path, header, np.column_stack([self.grid, self.states, self.psi]))


def integrate_state(
    p: ControlProblem,
    b: Float[np.ndarray, "... m"],
    u: ControlLike,
    T: float,
    config: IntegratorConfig | None = None,
    checkpoints: Sequence[float] = (),
) -> Trajectory:
    """Solve `dx/dt = f(x,u,t)`, `x(0) = b` with `J` as an extra component.

    `b` may carry leading batch axes; pair it with a `ControlBatch` to drive each row with its
    own control.
    """
    assert T > 0, f"Horizon must be positive, got {T}"
    config = config or IntegratorConfig()
    b = np.asarray(b, dtype=float)
    m = p.state_dim
    assert b.shape[-1] == m, f"Initial state has shape {b.shape}, expected (..., {m})"

    def rhs(t: float, y: np.ndarray, uu: np.ndarray) -> np.ndarray:
        x = y[..., :m]
        return np.concatenate(
            [p.dynamics(x, uu, t), np.asarray(p.running_cost(x, uu, t))[..., None]], axis=-1
        )

    y0 = np.concatenate([b, np.zeros(b.shape[:-1] + (1,))], axis=-1)
    grid, ys = solve(rhs, y0, 0.0, T, u, config, checkpoints)
    return Trajectory(grid=grid, states=ys[..., :m], running_cost=ys[..., m])


def _sensitivity_rhs(p: ControlProblem) -> AugmentedRHS:
    m = p.state_dim

    def rhs(t: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        batch = y.shape[:-1]
        x = y[..., :m]
        A = y[..., m + 1 : m + 1 + m * m].reshape(batch + (m, m))
        A_inv = y[..., m + 1 + m * m : m + 1 + 2 * m * m].reshape(batch + (m, m))
        F = p.dynamics_jac(x, u, t)
        g = p.cost_grad(x, u, t)
        return np.concatenate(
            [
                p.dynamics(x, u, t),
                np.asarray(p.running_cost(x, u, t))[..., None],
                (F @ A).reshape(batch + (m * m,)),
                (-A_inv @ F).reshape(batch + (m * m,)),
                _row_times(g, A),
            ],
            axis=-1,
        )

    return rhs


def integrate_sensitivity(
    p: ControlProblem,
    xi: Float[np.ndarray, "... m"],
    u_star: ControlLike,
    T: float,
    config: IntegratorConfig | None = None,
    checkpoints: Sequence[float] = (),
) -> SensitivityPath:
    """Integrate `x`, `J`, `A`, `A_inv` and `I` along `x(xi,u*;.)` on one grid.

    `A_inv` solves `d(A_inv)/dt = -A_inv df/dx` from the identity; it is never obtained by
    inverting `A`.
    """
    assert T > 0, f"Horizon must be positive, got {T}"
    config = config or IntegratorConfig()
    xi = np.asarray(xi, dtype=float)
    m = p.state_dim
    assert xi.shape[-1] == m, f"Initial state has shape {xi.shape}, expected (..., {m})"
    batch = xi.shape[:-1]
    eye = np.broadcast_to(np.eye(m).reshape(m * m), batch + (m * m,))
    y0 = np.concatenate([xi, np.zeros(batch + (1,)), eye, eye, np.zeros(batch + (m,))], axis=-1)
    grid, ys = solve(_sensitivity_rhs(p), y0, 0.0, T, u_star, config, checkpoints)
    n = grid.shape[0]
    return SensitivityPath(
        grid=grid,
        states=ys[..., :m],
        running_cost=ys[..., m],
        A=ys[..., m + 1 : m + 1 + m * m].reshape((n, *batch, m, m)),
        A_inv=ys[..., m + 1 + m * m : m + 1 + 2 * m * m].reshape((n, *batch, m, m)),
        I=ys[..., m + 1 + 2 * m * m :],
    )


def adjoint_rhs(p: ControlProblem, lam: float) -> AugmentedRHS:
    """Joint right-hand side of `(x, psi)` with `-dpsi/dt = psi df/dx - lam df0/dx`."""
    m = p.state_dim

    def rhs(t: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        x, psi = y[..., :m], y[..., m:]
        psi_dot = -_row_times(psi, p.dynamics_jac(x, u, t)) + lam * p.cost_grad(x, u, t)
        return np.concatenate([p.dynamics(x, u, t), psi_dot], axis=-1)

    return rhs


def integrate_adjoint(
    p: ControlProblem,
    x: Trajectory,
    u: ControlLike,
    lam: float,
    psi_at: tuple[float, Float[np.ndarray, " m"]],
    config: IntegratorConfig | None = None,
    checkpoints: Sequence[float] = (),
    cells_multiple: int = 1,
) -> CovectorPath:
    """Integrate the adjoint equation along `x` from an anchor `(t_a, psi_a)`.

    The state is re-integrated jointly with `psi` from the anchor, forwards to the end of `x`
    and backwards to 0, so both share the same stage times. The anchored value is reproduced
    exactly.
    """
    assert lam >= 0, f"lambda must be nonnegative, got {lam}"
    config = config or IntegratorConfig()
    t_a, psi_a = float(psi_at[0]), np.asarray(psi_at[1], dtype=float)
    T = float(x.grid[-1])
    assert 0.0 <= t_a <= T, f"Anchor time {t_a} outside [0, {T}]"
    assert psi_a.shape == (p.state_dim,), f"psi has shape {psi_a.shape}, expected ({p.state_dim},)"

    if t_a == 0.0 or np.any(np.isclose(x.grid, t_a, rtol=0, atol=1e-9)):
        x_a = x.state_at(t_a)
    else:
        x_a = integrate_state(p, x.states[0], u, t_a, config).final_state
    rhs = adjoint_rhs(p, lam)
    y_a = np.concatenate([x_a, psi_a])
    pieces_t, pieces_y = [], []
    if t_a > 0:
        t_back, y_back = solve(rhs, y_a, t_a, 0.0, u, config, checkpoints, cells_multiple)
        pieces_t.append(t_back[::-1][:-1])
        pieces_y.append(y_back[::-1][:-1])
    if t_a < T:
        t_fwd, y_fwd = solve(rhs, y_a, t_a, T, u, config, checkpoints, cells_multiple)
    else:
        t_fwd, y_fwd = np.array([t_a]), y_a[None]
    pieces_t.append(t_fwd)
    pieces_y.append(y_fwd)
    grid, ys = np.concatenate(pieces_t), np.concatenate(pieces_y)
    m = p.state_dim
    return CovectorPath(grid=grid, states=ys[:, :m], psi=ys[:, m:], lam=float(lam))


def fd_cost_gradient(
    p: ControlProblem,
    b: Float[np.ndarray, " m"],
    u_star: ControlLike,
    T: float,
    config: IntegratorConfig | None = None,
    rel_step: float = 1e-6,
) -> Float[np.ndarray, " m"]:
    """Central finite-difference gradient of `b -> J(b,u*;T)`, an oracle for `I(b;T)`."""
    config = config or IntegratorConfig()

    def final_cost(z: np.ndarray) -> np.ndarray:
        return integrate_state(p, z, u_star, T, config).final_cost

    return central_difference(final_cost, np.asarray(b, dtype=float), rel_step)[0]


def integrate_field(
    field: VectorField,
    y0: Float[np.ndarray, "... n"],
    u: ControlLike,
    t0: float,
    t1: float,
    config: IntegratorConfig | None = None,
    checkpoints: Sequence[float] = (),
) -> StatePath:
    """Flow of a generic controlled field from `(t0, y0)` to `t1` (either direction)."""
    config = config or IntegratorConfig()
    grid, ys = solve(lambda t, y, uu: field(y, uu, t), y0, t0, t1, u, config, checkpoints)
    return StatePath(grid=grid, states=ys)
