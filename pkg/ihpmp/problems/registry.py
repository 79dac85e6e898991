"""Built-in problems with closed-form partial derivatives."""

from collections.abc import Callable, Mapping

import numpy as np
from jaxtyping import Float
from numpy.typing import ArrayLike

from ihpmp.problems.base import Box, ControlProblem, ControlSet


class ProblemSpecError(ValueError):
    """Unknown registry entry, bad parameters or inconsistent dimensions in a problem spec."""


def piecewise_f_example(x: ArrayLike) -> Float[np.ndarray, "..."]:
    """Monotone convex drift `0` for `x < 0`, `x^2/2` on `[0, 1]` and `x - 1/2` for `x > 1`."""
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, 0.0, np.where(x <= 1, 0.5 * x * x, x - 0.5))


def piecewise_f_example_derivative(x: ArrayLike) -> Float[np.ndarray, "..."]:
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, 0.0, np.where(x <= 1, x, 1.0))


def _scalar(x: np.ndarray) -> np.ndarray:
    return x[..., 0]


def _column(value: np.ndarray) -> np.ndarray:
    return np.asarray(value)[..., None]


def _matrix(value: np.ndarray) -> np.ndarray:
    return np.asarray(value)[..., None, None]


def _bcast(*arrays: ArrayLike) -> list[np.ndarray]:
    return [np.asarray(a, dtype=float) for a in np.broadcast_arrays(*arrays)]


def _zero_cost(x: np.ndarray) -> np.ndarray:
    return np.zeros(np.shape(x)[:-1])


def bolza_example(params: Mapping[str, float]) -> ControlProblem:
    """`dx/dt = f(x) + u`, running cost `e^{-2t} x (x^4 - 5)`, `u in [0, 1]`, `b in [-1, 2]`."""
    _check_params("bolza-example", params, allowed=())

    def dynamics(x, u, t):
        xs, us, _ = _bcast(_scalar(x), _scalar(u), t)
        return _column(piecewise_f_example(xs) + us)

    def dynamics_jac(x, u, t):
        xs, _, _ = _bcast(_scalar(x), _scalar(u), t)
        return _matrix(piecewise_f_example_derivative(xs))

    def running_cost(x, u, t):
        xs, _, ts = _bcast(_scalar(x), _scalar(u), t)
        return np.exp(-2 * ts) * xs * (xs**4 - 5)

    def cost_grad(x, u, t):
        xs, _, ts = _bcast(_scalar(x), _scalar(u), t)
        return _column(np.exp(-2 * ts) * (5 * xs**4 - 5))

    return ControlProblem(
        name="bolza-example",
        state_dim=1,
        control_dim=1,
        dynamics=dynamics,
        running_cost=running_cost,
        initial_cost=_zero_cost,
        dynamics_jac=dynamics_jac,
        cost_grad=cost_grad,
        control_set=ControlSet(Box([0.0], [1.0])),
        initial_set=Box([-1.0], [2.0]),
    )


def lq_scalar(params: Mapping[str, float]) -> ControlProblem:
    """`dx/dt = a x + u`, running cost `x^2`, `u in [-1, 1]`, `b in [-1, 1]`."""
    _check_params("lq-scalar", params, allowed=("a",))
    a = float(params.get("a", 0.0))

    def dynamics(x, u, t):
        xs, us, _ = _bcast(_scalar(x), _scalar(u), t)
        return _column(a * xs + us)

    def dynamics_jac(x, u, t):
        xs, _, _ = _bcast(_scalar(x), _scalar(u), t)
        return _matrix(np.full_like(xs, a))

    def running_cost(x, u, t):
        xs, _, _ = _bcast(_scalar(x), _scalar(u), t)
        return xs * xs

    def cost_grad(x, u, t):
        xs, _, _ = _bcast(_scalar(x), _scalar(u), t)
        return _column(2 * xs)

    return ControlProblem(
        name="lq-scalar",
        state_dim=1,
        control_dim=1,
        dynamics=dynamics,
        running_cost=running_cost,
        initial_cost=_zero_cost,
        dynamics_jac=dynamics_jac,
        cost_grad=cost_grad,
        control_set=ControlSet(Box([-1.0], [1.0])),
        initial_set=Box([-1.0], [1.0]),
        params={"a": a},
    )


def null_problem(params: Mapping[str, float]) -> ControlProblem:
    """`f = 0`, `f0 = 0`, `l = 0` in dimension `m` (default 1) with one control in `[-1, 1]`."""
    _check_params("null", params, allowed=("m",))
    m = int(params.get("m", 1))
    if m < 1 or m != params.get("m", 1):
        raise ProblemSpecError(f"null problem needs a positive integer m, got {params.get('m')}")

    def batch_shape(x, u, t) -> tuple[int, ...]:
        return np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1], np.shape(t))

    return ControlProblem(
        name="null",
        state_dim=m,
        control_dim=1,
        dynamics=lambda x, u, t: np.zeros(batch_shape(x, u, t) + (m,)),
        running_cost=lambda x, u, t: np.zeros(batch_shape(x, u, t)),
        initial_cost=_zero_cost,
        dynamics_jac=lambda x, u, t: np.zeros(batch_shape(x, u, t) + (m, m)),
        cost_grad=lambda x, u, t: np.zeros(batch_shape(x, u, t) + (m,)),
        control_set=ControlSet(Box([-1.0], [1.0])),
        initial_set=Box(-np.ones(m), np.ones(m)),
        params={"m": float(m)},
    )


def _check_params(name: str, params: Mapping[str, float], allowed: tuple[str, ...]) -> None:
    unknown = sorted(set(params) - set(allowed))
    if unknown:
        raise ProblemSpecError(
            f"Problem {name!r} takes parameters {allowed}, got unknown {unknown}"
        )


REGISTRY: dict[str, Callable[[Mapping[str, float]], ControlProblem]] = {
    "bolza-example": bolza_example,
    "lq-scalar": lq_scalar,
    "null": null_problem,
}
