"""Closed forms and inequalities of the scalar example `dx/dt = f(x) + u`, cost `e^{-2t} g(x)`.

`g(z) = z (z^4 - 5)`. Along `u = 0` a trajectory that reaches 1 at time `theta` is
`2 / (theta + 2 - s)` before `theta` and `(e^{s - theta} + 1) / 2` after it.
"""

import numpy as np
from jaxtyping import Float
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict

from ihpmp.problems.base import ControlSignal


class InequalityCheck(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    z: float
    g: float
    above_fourth_power: bool
    above_linear: bool


def g(z: ArrayLike) -> Float[np.ndarray, "..."]:
    z = np.asarray(z, dtype=float)
    return z * (z**4 - 5)


def g_and_inequalities(z: float) -> InequalityCheck:
    """`g(z)` with `g(z) > z^4` for `z >= 2` and `g(z) >= -5z` for `z >= 0` (vacuous elsewhere)."""
    value = float(g(z))
    return InequalityCheck(
        z=z,
        g=value,
        above_fourth_power=z < 2 or value > z**4,
        above_linear=z < 0 or value >= -5 * z,
    )


def closed_form_trajectory(theta: float, s: ArrayLike) -> Float[np.ndarray, "..."]:
    """`x(s)` under `u = 0` for the trajectory that reaches 1 at `theta`."""
    assert theta > 0, f"theta must be positive, got {theta}"
    s = np.asarray(s, dtype=float)
    assert np.all(s >= 0), "s must be nonnegative"
    before = 2.0 / (theta + 2.0 - np.minimum(s, theta))
    after = 0.5 * (np.exp(np.maximum(s, theta) - theta) + 1.0)
    return np.where(s <= theta, before, after)


def initial_state_for_crossing(theta: float) -> float:
    return 2.0 / (theta + 2.0)


def eta_constant() -> float:
    """Time after the crossing at which `g(x)` returns to 0: `ln(80^{1/4} - 1)`."""
    return float(np.log(80**0.25 - 1.0))


def crossing_time(
    grid: Float[np.ndarray, " n"], x: Float[np.ndarray, " n"], level: float = 1.0
) -> float | None:
    """First time `x` reaches `level`, linearly interpolated between grid points; None if never."""
    above = np.flatnonzero(np.asarray(x) >= level)
    if above.size == 0:
        return None
    i = int(above[0])
    if i == 0:
        return float(grid[0])
    t0, t1, x0, x1 = grid[i - 1], grid[i], x[i - 1], x[i]
    return float(t0 + (level - x0) * (t1 - t0) / (x1 - x0))


def lower_bound_after_crossing(theta: float) -> float:
    """`-12 / (theta + 2)`, valid for every `t >= theta`."""
    return -12.0 / (theta + 2.0)


def lower_bound_at_horizon(theta: float, T: float) -> float:
    """`-12 / (theta + 2) + (T - theta - 2) e^{-2 theta}`, valid when `theta + 2 <= T`."""
    return lower_bound_after_crossing(theta) + (T - theta - 2.0) * np.exp(-2.0 * theta)


def sensitivity_closed_form(T: ArrayLike) -> Float[np.ndarray, "..."]:
    """`I(0;T) = -5/2 (1 - e^{-2T})`."""
    return -2.5 * (1.0 - np.exp(-2.0 * np.asarray(T, dtype=float)))


def true_costate(t: ArrayLike, lam: float = 1.0) -> Float[np.ndarray, "..."]:
    """`psi*(t) = 5 lam / 2 (e^{-2t} - 1)`."""
    return 2.5 * lam * (np.exp(-2.0 * np.asarray(t, dtype=float)) - 1.0)


def tail_costate(t: ArrayLike) -> Float[np.ndarray, "..."]:
    """The tail-integral co-state `5/2 e^{-2t}`; it violates the maximum condition."""
    return 2.5 * np.exp(-2.0 * np.asarray(t, dtype=float))


def control_library(
    n_signals: int, T: float, max_switches: int = 4, seed: int = 0
) -> list[ControlSignal]:
    """`u = 0`, `u = 1`, single bang-bang switches on a grid of `(0, T)`, then random signals.

    Random signals have one to `max_switches` switch times and levels in `[0, 1]`, half of them
    bang-bang.
    """
    assert n_signals >= 2, "the library always holds u = 0 and u = 1"
    rng = np.random.default_rng(seed)
    library = [ControlSignal.constant(0.0), ControlSignal.constant(1.0)]
    n_switch_grid = min(20, max(0, (n_signals - 2) // 4))
    for s in np.linspace(0.0, T, n_switch_grid + 2)[1:-1]:
        library.append(ControlSignal.piecewise([s], [0.0, 1.0]))
        library.append(ControlSignal.piecewise([s], [1.0, 0.0]))
    while len(library) < n_signals:
        n_switch = int(rng.integers(1, max_switches + 1))
        times = np.sort(rng.uniform(0.0, T, size=n_switch))
        if np.any(np.diff(times) <= 0) or times[0] <= 0:
            continue
        if len(library) % 2:
            levels = rng.integers(0, 2, size=n_switch + 1).astype(float)
        else:
            levels = rng.uniform(0.0, 1.0, size=n_switch + 1)
        library.append(ControlSignal.piecewise(times.tolist(), levels.tolist()))
    return library[:n_signals]
