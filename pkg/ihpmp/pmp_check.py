"""Residual checks of the maximum principle along a finite horizon, and applicability probes.

`check_pmp` integrates the state and adjoint on one equal-cell grid and measures

- the adjoint residual: the Boole-rule defect of `psi` against `-psi df/dx + lam df0/dx`, per
  group of four cells, divided by the group length;
- the maximum-condition residual `sup_v H(x, v, psi, lam, t) - H(x, u(t), psi, lam, t)` at every
  grid time;
- the normalisation error `| ||psi(0)|| + lam - 1 |`;
- the distance from `psi(0)` to `lam dl(b) + N_C(b)`.

The probes at the bottom of the module sample the hypotheses under which the sweep limit is a
valid co-state. They produce evidence at a finite budget, never proofs.
"""

from collections.abc import Callable, Sequence
from itertools import product
from typing import Literal

import numpy as np
from jaxtyping import Float
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt
from scipy.optimize import minimize_scalar

from ihpmp.cones import NormalCone, transversality_distance
from ihpmp.costate import (
    CostateCandidate,
    HorizonSequence,
    reference_sensitivity,
    sample_sensitivities,
)
from ihpmp.expressions import parse_expression
from ihpmp.integrate import IntegratorConfig, integrate_adjoint, integrate_state
from ihpmp.log import logger
from ihpmp.problems.base import Box, ControlLike, ControlProblem
from ihpmp.types import Vector
from ihpmp.utils import as_vector, to_tuple

# Boole's rule weights over four equal cells, in units of 2h/45
_BOOLE = np.array([7.0, 32.0, 12.0, 32.0, 7.0])


class PMPTolerances(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    adjoint: PositiveFloat = 1e-6
    normalization: PositiveFloat = 1e-6
    max_condition: PositiveFloat = 1e-4
    transversality: PositiveFloat = 1e-6
    control_grid: PositiveInt = Field(65, ge=2)
    refine_xatol: PositiveFloat = 1e-10
    probe: PositiveFloat = 1e-6


def hamiltonian(
    p: ControlProblem,
    x: ArrayLike,
    u: ArrayLike,
    psi: ArrayLike,
    lam: float,
    t: float | np.ndarray,
) -> Float[np.ndarray, "..."]:
    """`H = psi . f(x,u,t) - lam f0(x,u,t)`, broadcasting over leading axes."""
    x, u, psi = (np.asarray(a, dtype=float) for a in (x, u, psi))
    return np.sum(psi * p.dynamics(x, u, t), axis=-1) - lam * p.running_cost(x, u, t)


def _control_grid(box: Box, points: int) -> np.ndarray:
    # Keep the product grid tractable in higher control dimension
    per_axis = points if box.dim <= 2 else max(3, int(round(points ** (2 / box.dim))))
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(box.lo, box.hi, strict=True)]
    return np.array(list(product(*axes)))


def max_condition_residual(
    p: ControlProblem,
    x: ArrayLike,
    u: ArrayLike,
    psi: ArrayLike,
    lam: float,
    t: float,
    grid_points: int = 65,
    xatol: float = 1e-10,
) -> float:
    """`sup_{v in U(t)} H(x, v) - H(x, u)`, never negative.

    The supremum is taken over a dense grid of `U(t)` and refined coordinate-wise by bounded
    Brent search inside the neighbouring cells of the best grid point.
    """
    x, u, psi = (np.asarray(a, dtype=float) for a in (x, u, psi))
    box = p.control_set.at(t)
    grid = _control_grid(box, grid_points)
    values = hamiltonian(p, x, grid, psi, lam, t)
    best = grid[int(np.argmax(values))].copy()
    best_value = float(np.max(values))

    cell = (box.hi - box.lo) / max(grid_points - 1, 1)
    for i in range(box.dim):
        lo, hi = max(box.lo[i], best[i] - cell[i]), min(box.hi[i], best[i] + cell[i])
        if hi <= lo:
            continue

        def negated(v: float, i: int = i) -> float:
            trial = best.copy()
            trial[i] = v
            return -float(hamiltonian(p, x, trial, psi, lam, t))

        result = minimize_scalar(
            negated, bounds=(lo, hi), method="bounded", options={"xatol": xatol}
        )
        if -result.fun > best_value:
            best_value = -float(result.fun)
            best[i] = result.x
    current = float(hamiltonian(p, x, u, psi, lam, t))
    return max(best_value - current, 0.0)


class PMPReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    T: float
    candidate: CostateCandidate
    adjoint_residual: float
    max_condition_residual: float
    max_condition_worst_time: float
    normalization_error: float
    normalization_applicable: bool
    transversality_distance: float
    transversality_exact: bool
    verdicts: dict[str, bool]
    passed: bool
    tolerances: PMPTolerances
    profile_t: tuple[float, ...] = Field(default=(), exclude=True)
    profile_psi: tuple[Vector, ...] = Field(default=(), exclude=True)
    profile_residual: tuple[float, ...] = Field(default=(), exclude=True)

    def residual_at(self, t: float) -> float:
        """Maximum-condition residual at the grid time nearest to `t`."""
        idx = int(np.argmin(np.abs(np.array(self.profile_t) - t)))
        return self.profile_residual[idx]

    def psi_at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(np.array(self.profile_t) - t)))
        return np.array(self.profile_psi[idx])


def _boole_adjoint_residual(
    p: ControlProblem,
    grid: np.ndarray,
    states: np.ndarray,
    psi: np.ndarray,
    lam: float,
    u: ControlLike,
) -> float:
    n_groups = (grid.shape[0] - 1) // 4
    assert n_groups * 4 == grid.shape[0] - 1, "grid must consist of groups of four cells"
    idx = 4 * np.arange(n_groups)[:, None] + np.arange(5)[None, :]
    t, x, ps = grid[idx], states[idx], psi[idx]
    # One control per group; each group lies inside a single control segment
    controls = np.stack([u.at(float(tm)) for tm in grid[idx[:, 2]]])[:, None, :]
    controls = np.broadcast_to(controls, t.shape + (controls.shape[-1],))
    F = p.dynamics_jac(x, controls, t)
    rhs = -np.einsum("...i,...ij->...j", ps, F) + lam * p.cost_grad(x, controls, t)
    h = t[:, 1] - t[:, 0]
    quad = (2 * h / 45)[:, None] * np.einsum("k,gkm->gm", _BOOLE, rhs)
    defect = ps[:, 4] - ps[:, 0] - quad
    return float(np.max(np.abs(defect) / (4 * h)[:, None]))


def check_pmp(
    p: ControlProblem,
    b: ArrayLike,
    u: ControlLike,
    candidate: CostateCandidate,
    T: float,
    tolerances: PMPTolerances | None = None,
    integrator: IntegratorConfig | None = None,
    checkpoints: Sequence[float] = (),
) -> PMPReport:
    """Check the adjoint equation, the maximum condition, normalisation and transversality.

    The state and adjoint are integrated with `rk4` on a grid of four-cell groups at the step of
    `integrator`, whatever its method. Normalisation is only required of candidates flagged
    `normalized`; the error is reported either way.

    Raises:
        IntegrationError: If the state or adjoint cannot be integrated to `T`.
    """
    assert T > 0, f"Horizon must be positive, got {T}"
    tol = tolerances or PMPTolerances()
    step = (integrator or IntegratorConfig()).step
    grid_config = IntegratorConfig(method="rk4", step=step)
    b = as_vector(b, p.state_dim, "b")
    lam, psi0 = candidate.lam, candidate.psi0_array
    logger.info(f"Checking PMP relations on {p.name} to T={T:g} ({candidate.provenance} candidate)")

    traj = integrate_state(p, b, u, T, grid_config)
    path = integrate_adjoint(p, traj, u, lam, (0.0, psi0), grid_config, checkpoints, 4)

    adjoint = _boole_adjoint_residual(p, path.grid, path.states, path.psi, lam, u)
    profile = np.array(
        [
            max_condition_residual(
                p, x, u.at(float(t)), ps, lam, float(t), tol.control_grid, tol.refine_xatol
            )
            for t, x, ps in zip(path.grid, path.states, path.psi, strict=True)
        ]
    )
    worst = int(np.argmax(profile))

    normalization_error = abs(float(np.linalg.norm(psi0)) + lam - 1.0)
    cone = NormalCone.at(p.initial_set, b)
    distance = transversality_distance(psi0, lam, p.l_subgradients(b), cone)

    verdicts = {
        "adjoint": adjoint <= tol.adjoint,
        "max_condition": float(profile[worst]) <= tol.max_condition,
        "normalization": not candidate.normalized or normalization_error <= tol.normalization,
        "transversality": distance <= tol.transversality,
    }
    failed = [name for name, ok in verdicts.items() if not ok]
    if failed:
        logger.warning(f"PMP check failed on {p.name}: {', '.join(failed)}")
    return PMPReport(
        T=T,
        candidate=candidate,
        adjoint_residual=adjoint,
        max_condition_residual=float(profile[worst]),
        max_condition_worst_time=float(path.grid[worst]),
        normalization_error=normalization_error,
        normalization_applicable=candidate.normalized,
        transversality_distance=distance,
        transversality_exact=p.has_smooth_initial_cost,
        verdicts=verdicts,
        passed=not failed,
        tolerances=tol,
        profile_t=to_tuple(path.grid),
        profile_psi=tuple(to_tuple(v) for v in path.psi),
        profile_residual=to_tuple(profile),
    )


class Row620(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    tau: float
    b: Vector
    delta_I: float | None = None  # noqa: N815
    delta_J: float | None = None  # noqa: N815
    error: str | None = None


class Condition620Report(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    rows: list[Row620]
    verdict: Literal["consistent at budget", "inconsistent at budget", "vacuous at budget"]
    shrunk_index: int | None


def condition_620_probe(
    p: ControlProblem,
    b_star: ArrayLike,
    u_star: ControlLike,
    tau: HorizonSequence,
    b_sequence: Sequence[ArrayLike],
    tolerances: PMPTolerances | None = None,
    integrator: IntegratorConfig | None = None,
) -> Condition620Report:
    """Tabulate `dI_n = ||I(b_n;tau_n) - I(b*;tau_n)||` against the cost gap `dJ_n`.

    The sequence is consistent when `dI` has shrunk (to a tenth of its largest value, or below
    the probe tolerance) at the last index where `dJ` has shrunk to a tenth of its largest value.
    """
    tolerances = tolerances or PMPTolerances()
    assert len(b_sequence) == len(tau), "need one b_n per horizon"
    b_star = as_vector(b_star, p.state_dim, "b_star")
    bs = np.array([as_vector(b, p.state_dim, "b_n") for b in b_sequence])
    ray, ray_error = reference_sensitivity(p, b_star, u_star, tau.values, integrator)
    reached = ray.grid[-1] if ray is not None else -np.inf

    rows = []
    for t, b_n in zip(tau.values, bs, strict=True):
        if t > reached + 1e-12 or ray is None:
            rows.append(Row620(tau=t, b=to_tuple(b_n), error=ray_error))
            continue
        path, error = reference_sensitivity(p, b_n, u_star, (t,), integrator)
        if path is None:
            rows.append(Row620(tau=t, b=to_tuple(b_n), error=error))
            continue
        rows.append(
            Row620(
                tau=t,
                b=to_tuple(b_n),
                delta_I=float(np.linalg.norm(path.I[-1] - ray.I_at(t))),
                delta_J=float(abs(path.final_cost - ray.cost_at(t))),
            )
        )

    valid = [(i, r) for i, r in enumerate(rows) if r.delta_I is not None]
    dI = np.array([r.delta_I for _, r in valid], dtype=float)
    dJ = np.array([r.delta_J for _, r in valid], dtype=float)
    if len(valid) == 0:
        return Condition620Report(rows=rows, verdict="vacuous at budget", shrunk_index=None)
    if not np.any(dI) and not np.any(dJ):
        return Condition620Report(rows=rows, verdict="consistent at budget", shrunk_index=None)
    shrunk = np.flatnonzero(dJ <= 0.1 * dJ.max())
    if shrunk.size == 0:
        return Condition620Report(rows=rows, verdict="vacuous at budget", shrunk_index=None)
    last = int(shrunk[-1])
    consistent = dI[last] <= max(tolerances.probe, 0.1 * dI.max())
    if not consistent:
        logger.warning(f"Sensitivity gap does not shrink with the cost gap on {p.name}")
    return Condition620Report(
        rows=rows,
        verdict="consistent at budget" if consistent else "inconsistent at budget",
        shrunk_index=valid[last][0],
    )


class ModulusRow(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    tau: float
    delta: float
    modulus: float


class EquicontinuityReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    table: list[ModulusRow]
    verdict: Literal["equicontinuous at budget", "not equicontinuous at budget"]
    gradient_gap: float | None = None


def _neighbourhood(b_star: np.ndarray, radius: float, samples: int, seed: int) -> np.ndarray:
    assert radius > 0, f"radius must be positive, got {radius}"
    return np.concatenate([b_star[None], Box.around(b_star, radius).sample(samples, seed)])


def equicontinuity_probe(
    p: ControlProblem,
    b_star: ArrayLike,
    u_star: ControlLike,
    tau: HorizonSequence,
    radius: float,
    samples: int = 16,
    seed: int = 0,
    n_deltas: int = 4,
    tolerances: PMPTolerances | None = None,
    integrator: IntegratorConfig | None = None,
    jobs: int = 1,
) -> EquicontinuityReport:
    """Empirical moduli of `b -> I(b;tau_n) - I(b*;tau_n)` near `b*`.

    For each horizon and each `delta = radius * 2^-j`, the modulus is the largest change over
    sampled pairs at most `delta` apart. The maps look equicontinuous when, at every `delta`,
    the modulus at the last horizon stays within 1.25 times the previous one plus the probe
    tolerance. When they do and `l` is smooth, `||I(b*;tau_N) + grad l(b*)||` is reported.
    """
    tolerances = tolerances or PMPTolerances()
    b_star = as_vector(b_star, p.state_dim, "b_star")
    pts = _neighbourhood(b_star, radius, samples, seed)
    values = sample_sensitivities(p, pts, u_star, tau, integrator, jobs).I

    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    deltas = radius * 2.0 ** -np.arange(n_deltas)
    moduli = np.zeros((len(tau), n_deltas))
    for n in range(len(tau)):
        gaps = np.linalg.norm(values[:, None, n] - values[None, :, n], axis=-1)
        gaps = np.where(np.isnan(gaps), np.inf, gaps)
        for j, delta in enumerate(deltas):
            moduli[n, j] = np.max(np.where(dist <= delta, gaps, 0.0))
    table = [
        ModulusRow(tau=t, delta=float(d), modulus=float(moduli[n, j]))
        for n, t in enumerate(tau.values)
        for j, d in enumerate(deltas)
    ]
    holds = len(tau) >= 2 and bool(
        np.all(np.isfinite(moduli[-2:]))
        and np.all(moduli[-1] <= 1.25 * moduli[-2] + tolerances.probe)
    )
    gradient_gap = None
    if holds and p.has_smooth_initial_cost:
        gradient_gap = float(np.linalg.norm(values[0, -1] + p.initial_cost_grad(b_star)))
    if not holds:
        logger.warning(f"Sensitivity moduli grow along the horizons on {p.name}")
    return EquicontinuityReport(
        table=table,
        verdict="equicontinuous at budget" if holds else "not equicontinuous at budget",
        gradient_gap=gradient_gap,
    )


class ModulusViolation(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    b: Vector
    n: int
    k: int
    lhs: float
    rhs: float


OmegaFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


def compile_omega(omega: str | OmegaFunction) -> OmegaFunction:
    """An `omega(s, j)` callable from a formula over `s` and `j`, or the callable itself."""
    if callable(omega):
        return omega
    ast = parse_expression(omega, variables=("s", "j"))
    return lambda s, j: ast.evaluate({"s": s, "j": j})


def omega_modulus_check(
    p: ControlProblem,
    b_star: ArrayLike,
    u_star: ControlLike,
    tau: HorizonSequence,
    omega: str | OmegaFunction,
    samples: int = 0,
    radius: float = 0.1,
    seed: int = 0,
    tolerances: PMPTolerances | None = None,
    integrator: IntegratorConfig | None = None,
    jobs: int = 1,
) -> list[ModulusViolation]:
    """All sampled `(b, n > k)` with `||I(b;tau_n) - I(b;tau_k)|| > omega(1/tau_k, |dJ|)`.

    `b` ranges over `b*` and `samples` Latin-hypercube points of the box of half-width `radius`.
    """
    tolerances = tolerances or PMPTolerances()
    fn = compile_omega(omega)
    b_star = as_vector(b_star, p.state_dim, "b_star")
    pts = _neighbourhood(b_star, radius, samples, seed) if samples else b_star[None]
    sampled = sample_sensitivities(p, pts, u_star, tau, integrator, jobs)

    violations = []
    taus = np.array(tau.values)
    for s in range(pts.shape[0]):
        for n in range(len(tau)):
            for k in range(n):
                lhs = float(np.linalg.norm(sampled.I[s, n] - sampled.I[s, k]))
                j = abs(sampled.J[s, n] - sampled.J[s, k])
                rhs = float(fn(np.asarray(1.0 / taus[k]), np.asarray(j)))
                if not np.isfinite(lhs) or lhs > rhs + tolerances.probe:
                    violations.append(
                        ModulusViolation(b=to_tuple(pts[s]), n=n, k=k, lhs=lhs, rhs=rhs)
                    )
    if violations:
        logger.warning(f"{len(violations)} modulus violations on {p.name} at this budget")
    return violations
