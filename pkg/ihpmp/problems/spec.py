"""External problem specifications: a registry name or inline formulas."""

from collections.abc import Sequence
from pathlib import Path
from typing import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator

from ihpmp.expressions import ExpressionAST, differentiate, parse_expression
from ihpmp.log import logger
from ihpmp.problems.base import Box, ControlProblem, ControlSet
from ihpmp.problems.registry import REGISTRY, ProblemSpecError
from ihpmp.utils import read_config_file


class ProblemSpec(BaseModel):
    """Either `name` (plus `params`) of a registry problem, or a full inline definition."""

    model_config = ConfigDict(extra="forbid", frozen=True)
    name: str | None = None
    state_dim: PositiveInt | None = None
    control_dim: PositiveInt | None = None
    f: list[str] | None = None
    f0: str = "0"
    l: str = "0"  # noqa: E741
    u_lo: list[float] | None = None
    u_hi: list[float] | None = None
    c_lo: list[float] | None = None
    c_hi: list[float] | None = None
    params: dict[str, float] = {}

    @model_validator(mode="after")
    def validate_form(self) -> Self:
        inline = (
            self.state_dim, self.control_dim, self.f, self.u_lo, self.u_hi, self.c_lo, self.c_hi
        )
        if self.name is None and any(v is None for v in inline):
            raise ValueError(
                "An inline problem needs state_dim, control_dim, f, u_lo, u_hi, c_lo and c_hi"
            )
        if self.name is not None and any(v is not None for v in inline):
            raise ValueError("Give either a registry name or an inline definition, not both")
        return self

    @classmethod
    def from_file(cls, path: Path | str) -> "ProblemSpec":
        try:
            return cls(**read_config_file(path))
        except (OSError, ValueError) as e:
            raise ProblemSpecError(f"Could not read problem spec {path}: {e}") from e


def _check_length(values: Sequence[object], expected: int, what: str) -> None:
    if len(values) != expected:
        raise ProblemSpecError(
            f"dimension mismatch: {what} has {len(values)} entries, expected {expected}"
        )


def _stack(asts: list[ExpressionAST], env: dict[str, np.ndarray]) -> np.ndarray:
    return np.stack([a.evaluate(env) for a in asts], axis=-1)


def _inline_problem(spec: ProblemSpec) -> ControlProblem:
    assert spec.state_dim is not None and spec.control_dim is not None and spec.f is not None
    assert spec.u_lo is not None and spec.u_hi is not None
    assert spec.c_lo is not None and spec.c_hi is not None
    m, k = spec.state_dim, spec.control_dim
    _check_length(spec.f, m, "f")
    _check_length(spec.u_lo, k, "u_lo")
    _check_length(spec.u_hi, k, "u_hi")
    _check_length(spec.c_lo, m, "c_lo")
    _check_length(spec.c_hi, m, "c_hi")

    xs = [f"x{i + 1}" for i in range(m)]
    us = [f"u{i + 1}" for i in range(k)]
    variables = (*xs, *us, "t")
    f = [parse_expression(src, variables, spec.params) for src in spec.f]
    f0 = parse_expression(spec.f0, variables, spec.params)
    l_ast = parse_expression(spec.l, xs, spec.params)
    dfdx = [[differentiate(fi, xj) for xj in xs] for fi in f]
    df0dx = [differentiate(f0, xj) for xj in xs]
    dldx = [differentiate(l_ast, xj) for xj in xs]

    def env(x: np.ndarray, u: np.ndarray, t: object) -> dict[str, np.ndarray]:
        x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
        values = {name: x[..., i] for i, name in enumerate(xs)}
        values.update({name: u[..., i] for i, name in enumerate(us)})
        values["t"] = np.asarray(t, dtype=float)
        return values

    def initial_cost(b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        return l_ast.evaluate({name: b[..., i] for i, name in enumerate(xs)})

    def l_gradient(b: np.ndarray) -> np.ndarray:
        values = {name: np.asarray(b, dtype=float)[..., i] for i, name in enumerate(xs)}
        return _stack(dldx, values)

    return ControlProblem(
        name="inline",
        state_dim=m,
        control_dim=k,
        dynamics=lambda x, u, t: _stack(f, env(x, u, t)),
        running_cost=lambda x, u, t: f0.evaluate(env(x, u, t)),
        initial_cost=initial_cost,
        dynamics_jac=lambda x, u, t: np.stack([_stack(row, env(x, u, t)) for row in dfdx], axis=-2),
        cost_grad=lambda x, u, t: _stack(df0dx, env(x, u, t)),
        control_set=ControlSet(Box(spec.u_lo, spec.u_hi)),
        initial_set=Box(spec.c_lo, spec.c_hi),
        l_gradient=l_gradient,
        params=dict(spec.params),
    )


def load_problem(spec: ProblemSpec | str | Path) -> ControlProblem:
    """Build a `ControlProblem` from a spec, a spec file path or a registry name.

    Raises:
        ProblemSpecError: Unknown registry name, bad parameters or mismatched dimensions.
        ExpressionSyntaxError, UnknownIdentifierError, ArityError: From parsing inline formulas.
    """
    if isinstance(spec, str | Path):
        path = Path(spec)
        if path.suffix in (".json", ".yaml", ".yml"):
            spec = ProblemSpec.from_file(path)
        else:
            spec = ProblemSpec(name=str(spec))
    if spec.name is not None:
        if spec.name not in REGISTRY:
            raise ProblemSpecError(
                f"Unknown registry problem {spec.name!r}; choose from {sorted(REGISTRY)}"
            )
        problem = REGISTRY[spec.name](spec.params)
    else:
        problem = _inline_problem(spec)
    logger.info(
        f"Loaded problem {problem.name!r} (m={problem.state_dim}, k={problem.control_dim}, "
        f"params={problem.params})"
    )
    return problem
