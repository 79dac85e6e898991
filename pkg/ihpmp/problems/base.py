"""Typed descriptions of infinite-horizon Bolza problems.

All problem functions accept leading batch axes: `x` has shape `(..., m)`, `u` has shape
`(..., k)` and `t` is a float or an array broadcastable against the batch shape.
"""

import re
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np
from jaxtyping import Float
from numpy.typing import ArrayLike
from scipy.stats import qmc

from ihpmp.types import Control, Covector, State

TimeLike = float | Float[np.ndarray, "..."]
Dynamics = Callable[[State, Control, TimeLike], State]
RunningCost = Callable[[State, Control, TimeLike], Float[np.ndarray, "..."]]
InitialCost = Callable[[State], Float[np.ndarray, "..."]]
DynamicsJacobian = Callable[[State, Control, TimeLike], Float[np.ndarray, "... m m"]]
CostGradient = Callable[[State, Control, TimeLike], Covector]
SubdifferentialOracle = Callable[[Float[np.ndarray, " m"]], Float[np.ndarray, "n m"]]
InitialCostGradient = Callable[[Float[np.ndarray, "... m"]], Float[np.ndarray, "... m"]]


def _frozen_array(values: ArrayLike) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Box:
    """Axis-aligned box `[lo_1, hi_1] x ... x [lo_d, hi_d]`."""

    lo: Float[np.ndarray, " d"]
    hi: Float[np.ndarray, " d"]

    def __post_init__(self) -> None:
        lo = _frozen_array(np.atleast_1d(self.lo))
        hi = _frozen_array(np.atleast_1d(self.hi))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"Box bounds must be equal-length vectors, got {lo.shape}, {hi.shape}")
        if np.any(lo > hi):
            raise ValueError(f"Box lower bounds exceed upper bounds: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, center: ArrayLike, radius: float) -> "Box":
        c = np.atleast_1d(np.asarray(center, dtype=float))
        return cls(c - radius, c + radius)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def contains(self, x: ArrayLike, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def clip(self, x: ArrayLike) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def inflate(self, factor: float) -> "Box":
        """Scale the half-widths about the center by `factor`."""
        return Box(self.center - factor * self.half_width, self.center + factor * self.half_width)

    def hull(self, points: Float[np.ndarray, "... d"]) -> "Box":
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return Box(np.minimum(self.lo, pts.min(axis=0)), np.maximum(self.hi, pts.max(axis=0)))

    def distance_to_boundary(self, x: ArrayLike) -> float:
        """Euclidean distance from an inside point to the boundary (0 outside the box)."""
        x = np.asarray(x, dtype=float)
        if not bool(self.contains(x)):
            return 0.0
        return float(np.min(np.minimum(x - self.lo, self.hi - x)))

    def corners(self, limit: int = 256, seed: int = 0) -> Float[np.ndarray, "c d"]:
        """All vertices, or a seeded random subset of `limit` of them in high dimension."""
        if 2**self.dim <= limit:
            picks = np.array(list(product((0, 1), repeat=self.dim)), dtype=bool)
        else:
            picks = np.random.default_rng(seed).integers(0, 2, size=(limit, self.dim)).astype(bool)
        return np.where(picks, self.hi, self.lo)

    def sample(self, n: int, seed: int) -> Float[np.ndarray, "n d"]:
        """Latin-hypercube sample of `n` points."""
        if n == 0:
            return np.empty((0, self.dim))
        unit = qmc.LatinHypercube(d=self.dim, seed=seed).random(n)
        return self.lo + unit * (self.hi - self.lo)

    def probe_points(self, n: int, seed: int) -> Float[np.ndarray, "p d"]:
        """Corners, center and an interior Latin-hypercube sample: the standard sup-estimate set."""
        return np.concatenate([self.corners(seed=seed), self.center[None], self.sample(n, seed)])


@dataclass(frozen=True)
class ControlSet:
    """Box-valued control constraint `U(t)`; constant unless a schedule is given."""

    box: Box
    schedule: Callable[[float], Box] | None = None

    def at(self, t: float) -> Box:
        if self.schedule is None:
            return self.box
        box = self.schedule(t)
        if np.any(box.lo > box.hi):
            raise ValueError(f"Control bounds are inverted at t={t}")
        return box

    @property
    def dim(self) -> int:
        return self.box.dim


class ControlLike(Protocol):
    """Anything the integrators can drive a system with."""

    def at(self, t: float) -> np.ndarray: ...

    def breakpoints(self, t_lo: float, t_hi: float) -> np.ndarray: ...


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant control on right-open cells `[grid[i], grid[i+1])`.

    `values[i]` applies on cell `i` and `tail` applies from `grid[-1]` onwards.
    """

    grid: Float[np.ndarray, " n"]
    values: Float[np.ndarray, "n-1 k"]
    tail: Float[np.ndarray, " k"]

    def __post_init__(self) -> None:
        grid = _frozen_array(np.atleast_1d(self.grid))
        tail = _frozen_array(np.atleast_1d(self.tail))
        values = _frozen_array(np.asarray(self.values, dtype=float).reshape(-1, tail.shape[0]))
        if grid[0] != 0.0:
            raise ValueError(f"Control grid must start at 0, got {grid[0]}")
        if np.any(np.diff(grid) <= 0) or not np.all(np.isfinite(grid)):
            raise ValueError("Control grid must be finite and strictly increasing")
        if values.shape[0] != grid.shape[0] - 1:
            raise ValueError(
                f"Need one control value per cell: {grid.shape[0] - 1} cells, "
                f"{values.shape[0]} values"
            )
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "tail", tail)

    @classmethod
    def constant(cls, value: ArrayLike) -> "ControlSignal":
        tail = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid=np.zeros(1), values=np.empty((0, tail.shape[0])), tail=tail)

    @classmethod
    def piecewise(
        cls, switch_times: Sequence[float], levels: Sequence[ArrayLike]
    ) -> "ControlSignal":
        """`levels[0]` until `switch_times[0]`, then `levels[1]`, ..., the last level forever."""
        assert len(levels) == len(switch_times) + 1, "need one more level than switch times"
        lv = np.array([np.atleast_1d(np.asarray(v, dtype=float)) for v in levels])
        return cls(grid=np.concatenate([[0.0], switch_times]), values=lv[:-1], tail=lv[-1])

    @classmethod
    def from_csv(cls, path: Path | str) -> "ControlSignal":
        """Read rows `t, u1..uk` below an optional header.

        The first `t` is 0 and the last row gives the tail value.
        """
        with open(path) as f:
            first = f.readline()
        skip = 0 if re.fullmatch(r"[\s\d.,eE+-]*", first) else 1
        rows = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, skiprows=skip)
        if rows.shape[1] < 2:
            raise ValueError(f"Control file {path} needs columns t,u1..uk")
        return cls(grid=rows[:, 0], values=rows[:-1, 1:], tail=rows[-1, 1:])

    def to_rows(self) -> Float[np.ndarray, "n k+1"]:
        vals = np.concatenate([self.values, self.tail[None]])
        return np.column_stack([self.grid, vals])

    @property
    def control_dim(self) -> int:
        return self.tail.shape[0]

    def at(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.grid, t, side="right")) - 1
        if idx >= self.values.shape[0]:
            return self.tail
        # Times before 0 only appear as integrator stage times and take the first value
        return self.values[max(idx, 0)]

    def breakpoints(self, t_lo: float, t_hi: float) -> np.ndarray:
        """Switch times strictly inside `(t_lo, t_hi)`."""
        lo, hi = min(t_lo, t_hi), max(t_lo, t_hi)
        return self.grid[(self.grid > lo) & (self.grid < hi)]

    def is_admissible(self, control_set: ControlSet, tol: float = 1e-12) -> bool:
        cells = np.concatenate([self.grid, [self.grid[-1] + 1.0]])
        for i, value in enumerate(np.concatenate([self.values, self.tail[None]])):
            for t in (cells[i], 0.5 * (cells[i] + cells[i + 1])):
                if not bool(control_set.at(float(t)).contains(value, tol)):
                    return False
        return True

    def replace_window(self, start: float, stop: float, value: ArrayLike) -> "ControlSignal":
        """This signal with `value` applied on `[start, stop)`."""
        assert 0 <= start < stop, f"bad window [{start}, {stop})"
        value = np.atleast_1d(np.asarray(value, dtype=float))
        knots = np.unique(np.concatenate([self.grid, [start, stop]]))
        levels = [value if start <= t < stop else self.at(float(t)) for t in knots]
        return ControlSignal(grid=knots, values=np.array(levels[:-1]), tail=levels[-1])


def disagreement(u: ControlSignal, v: ControlSignal, T: float) -> float:
    """Measure of `{t in [0, T] : u(t) != v(t)}`."""
    knots = np.unique(np.concatenate([[0.0, T], u.breakpoints(0, T), v.breakpoints(0, T)]))
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:], strict=True):
        mid = 0.5 * (a + b)
        if not np.array_equal(u.at(mid), v.at(mid)):
            total += b - a
    return total


@dataclass(frozen=True)
class ControlBatch:
    """A batch of signals, one per leading row of a batched state, for single-pass integration."""

    signals: tuple[ControlSignal, ...]
    index: Float[np.ndarray, " B"] = field(default_factory=lambda: np.empty(0))

    def __post_init__(self) -> None:
        index = np.arange(len(self.signals)) if len(self.index) == 0 else self.index
        object.__setattr__(self, "index", np.asarray(index, dtype=int))

    def at(self, t: float) -> np.ndarray:
        return np.stack([s.at(t) for s in self.signals])[self.index]

    def breakpoints(self, t_lo: float, t_hi: float) -> np.ndarray:
        pts = [s.breakpoints(t_lo, t_hi) for s in self.signals]
        return np.unique(np.concatenate(pts)) if pts else np.empty(0)


class DerivativeCheck(NamedTuple):
    jacobian_error: float
    gradient_error: float
    passed: bool


def central_difference(
    fn: Callable[[np.ndarray], np.ndarray], x: Float[np.ndarray, "... d"], rel_step: float = 1e-6
) -> Float[np.ndarray, "... out d"]:
    """Central-difference Jacobian of a batched function, derivative index last."""
    x = np.asarray(x, dtype=float)
    h = rel_step * np.maximum(1.0, np.abs(x))
    cols = []
    for j in range(x.shape[-1]):
        step = np.zeros_like(x)
        step[..., j] = h[..., j]
        delta = np.asarray(fn(x + step)) - np.asarray(fn(x - step))
        if delta.ndim == x.ndim:
            cols.append(delta / (2 * h[..., j, None]))
        else:
            cols.append((delta / (2 * h[..., j]))[..., None])
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class ControlProblem:
    """Dynamics, costs and constraint sets of a Bolza problem, with exact state partials."""

    name: str
    state_dim: int
    control_dim: int
    dynamics: Dynamics
    running_cost: RunningCost
    initial_cost: InitialCost
    dynamics_jac: DynamicsJacobian
    cost_grad: CostGradient
    control_set: ControlSet
    initial_set: Box
    l_subdifferential: SubdifferentialOracle | None = None
    l_gradient: InitialCostGradient | None = None
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError(
                f"Dimensions must be positive: m={self.state_dim}, k={self.control_dim}"
            )
        if self.control_set.dim != self.control_dim:
            raise ValueError(
                f"Control set has dim {self.control_set.dim}, expected {self.control_dim}"
            )
        if self.initial_set.dim != self.state_dim:
            raise ValueError(
                f"Initial set has dim {self.initial_set.dim}, expected {self.state_dim}"
            )

    @property
    def has_smooth_initial_cost(self) -> bool:
        return self.l_subdifferential is None

    def initial_cost_grad(self, b: Float[np.ndarray, " m"]) -> Float[np.ndarray, " m"]:
        b = np.asarray(b, dtype=float)
        if self.l_gradient is not None:
            return np.asarray(self.l_gradient(b), dtype=float)
        return central_difference(self.initial_cost, b)[0]

    def l_subgradients(self, b: Float[np.ndarray, " m"]) -> Float[np.ndarray, "n m"]:
        """Finite set of subgradients of `l` at `b`; the gradient when `l` is smooth."""
        if self.l_subdifferential is not None:
            return np.atleast_2d(self.l_subdifferential(np.asarray(b, dtype=float)))
        return self.initial_cost_grad(b)[None]

    def default_control(self) -> ControlSignal:
        """The constant control closest to zero in `U(0)`."""
        return ControlSignal.constant(self.control_set.at(0.0).clip(np.zeros(self.control_dim)))

    def check_derivatives(
        self, n_probes: int = 100, tol: float = 1e-5, seed: int = 0, t_max: float = 1.0
    ) -> DerivativeCheck:
        """Compare `dynamics_jac` and `cost_grad` with central differences in a unit box."""
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1.0, 1.0, size=(n_probes, self.state_dim))
        t = rng.uniform(0.0, t_max, size=n_probes)
        boxes = [self.control_set.at(float(s)) for s in t]
        u = np.array([b.lo + rng.uniform(size=self.control_dim) * (b.hi - b.lo) for b in boxes])

        fd_jac = central_difference(lambda z: self.dynamics(z, u, t), x)
        fd_grad = central_difference(lambda z: self.running_cost(z, u, t), x)[..., 0, :]
        jac_err = float(np.max(np.abs(fd_jac - self.dynamics_jac(x, u, t))))
        grad_err = float(np.max(np.abs(fd_grad - self.cost_grad(x, u, t))))
        return DerivativeCheck(jac_err, grad_err, jac_err <= tol and grad_err <= tol)


@dataclass(frozen=True)
class VectorField:
    """Controlled field `dy/dt = a(y, u, t)` on `R^dim`; the Jacobian falls back to differences."""

    dim: int
    control_dim: int
    rhs: Dynamics
    control_set: ControlSet
    jac: DynamicsJacobian | None = None

    def __call__(self, y: State, u: Control, t: TimeLike) -> State:
        return self.rhs(y, u, t)

    def jacobian(self, y: State, u: Control, t: TimeLike) -> Float[np.ndarray, "... n n"]:
        if self.jac is not None:
            return self.jac(y, u, t)
        return central_difference(lambda z: self.rhs(z, u, t), y)
