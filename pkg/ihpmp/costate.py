"""Limiting co-states from horizon sweeps.

The sweep evaluates the sensitivity integral `I(xi_n; tau_n)` over a growing horizon sequence and
classifies the outcome:

- `NormalFinite`: the values settle (Cauchy criterion) with bounded norms. The candidate is
  `lam = 1`, `psi(0) = -I_*`.
- `AbnormalUnbounded`: the norms pass the divergence threshold while the normalised directions
  settle. The candidate is `lam = 0`, `psi(0) = -direction`.
- `Inconclusive`: neither, at this budget.

Alongside the sweep live the explicit co-state formulas (the tail-integral formula evaluated
over a tail horizon sequence and its finite-`I_*` variant) and sampling probes of the joint
limit in `(xi, tau)` and of the subdifferentials at infinity.
"""

import re
from collections.abc import Sequence
from typing import Literal, NamedTuple, Self

import numpy as np
from jaxtyping import Float
from numpy.typing import ArrayLike
from pydantic import (
    BaseModel,
    ConfigDict,
    NonNegativeFloat,
    PositiveFloat,
    PositiveInt,
    model_validator,
)
from scipy.cluster.hierarchy import fcluster, linkage

from ihpmp.cones import NormalCone, transversality_distance
from ihpmp.integrate import (
    CovectorPath,
    IntegrationError,
    IntegratorConfig,
    SensitivityPath,
    integrate_adjoint,
    integrate_sensitivity,
)
from ihpmp.log import logger
from ihpmp.problems.base import ControlLike, ControlProblem
from ihpmp.types import Vector
from ihpmp.utils import as_vector, parallel_map, successive_differences, to_tuple

Classification = Literal["NormalFinite", "AbnormalUnbounded", "Inconclusive"]
Provenance = Literal["backward-shot", "ak-formula", "joint-limit", "user"]


class InconclusiveReportError(ValueError):
    """A candidate was requested from a sweep that did not classify."""


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    eps_lim: PositiveFloat = 1e-6
    divergence_threshold: PositiveFloat = 1e6
    transversality_tol: PositiveFloat = 1e-6

    def cauchy_tol(self, value: ArrayLike) -> float:
        return self.eps_lim * (1.0 + float(np.linalg.norm(value)))


class HorizonSequence(BaseModel):
    """Finite prefix `tau_1 < ... < tau_N` of an unbounded horizon sequence."""

    model_config = ConfigDict(extra="forbid", frozen=True)
    values: tuple[PositiveFloat, ...]
    generator: str = "list"

    @model_validator(mode="after")
    def validate_values(self) -> Self:
        if len(self.values) == 0:
            raise ValueError("A horizon sequence needs at least one horizon")
        if any(b <= a for a, b in zip(self.values[:-1], self.values[1:], strict=True)):
            raise ValueError(f"Horizons must be strictly increasing, got {self.values}")
        return self

    @classmethod
    def geometric(cls, tau0: float, ratio: float, n: int) -> "HorizonSequence":
        assert ratio > 1 and n >= 1, f"need ratio > 1 and n >= 1, got {ratio}, {n}"
        return cls(
            values=tuple(tau0 * ratio**i for i in range(n)),
            generator=f"geometric:{tau0:g}:{ratio:g}:{n}",
        )

    @classmethod
    def parse(cls, spec: "str | Sequence[float] | HorizonSequence") -> "HorizonSequence":
        """Parse `geometric:tau0:r:N` or `list:t1,t2,...` (a plain sequence is also accepted)."""
        if isinstance(spec, HorizonSequence):
            return spec
        if not isinstance(spec, str):
            return cls(values=tuple(float(v) for v in spec))
        kind, _, rest = spec.partition(":")
        try:
            if kind == "geometric":
                tau0, ratio, n = rest.split(":")
                return cls.geometric(float(tau0), float(ratio), int(n))
            if kind == "list":
                return cls(values=tuple(float(v) for v in re.split(r"[,\s]+", rest.strip()) if v))
        except (AssertionError, ValueError) as e:
            raise ValueError(f"Invalid horizon sequence {spec!r}: {e}") from e
        raise ValueError(f"Horizons must be geometric:tau0:r:N or list:t1,..., got {spec!r}")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def last(self) -> float:
        return self.values[-1]

    def shifted(self, start: float) -> "HorizonSequence":
        """`start + tau_n`, used for tail horizons beyond `start`."""
        return HorizonSequence(
            values=tuple(start + v for v in self.values), generator=f"{start:g}+{self.generator}"
        )


class CostateCandidate(BaseModel):
    """Multipliers `(lam, psi(0))` of the adjoint system with their provenance."""

    model_config = ConfigDict(extra="forbid", frozen=True)
    lam: NonNegativeFloat
    psi0: Vector
    provenance: Provenance = "user"
    shot_index: int | None = None
    normalized: bool = False

    @model_validator(mode="after")
    def validate_multipliers(self) -> Self:
        norm = float(np.linalg.norm(self.psi0))
        if self.lam == 0 and norm == 0:
            raise ValueError("Multipliers (lam, psi0) must not both vanish")
        if self.normalized and abs(norm + self.lam - 1.0) > 1e-10:
            raise ValueError(f"Normalized candidate has ||psi0|| + lam = {norm + self.lam}")
        return self

    @property
    def psi0_array(self) -> Float[np.ndarray, " m"]:
        return np.array(self.psi0, dtype=float)

    def normalize(self) -> "CostateCandidate":
        """Scale so that `||psi(0)|| + lam = 1`."""
        scale = float(np.linalg.norm(self.psi0)) + self.lam
        return self.model_copy(
            update={
                "lam": self.lam / scale,
                "psi0": to_tuple(self.psi0_array / scale),
                "normalized": True,
            }
        )


class SweepRow(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    tau: float
    xi: Vector
    I: Vector | None = None  # noqa: E741
    normI: float | None = None  # noqa: N815
    j_gap: float | None = None
    ratio_641: float | None = None
    error: str | None = None


class PrefixVerdict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    n: int
    classification: Classification


class LimitReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    classification: Classification
    limit_vector: Vector | None
    table: list[SweepRow]
    residuals: list[float]
    direction_residuals: list[float]
    history: list[PrefixVerdict]
    subsequence_hint: str | None = None
    b_star: Vector
    horizons: str

    def to_rows(self) -> tuple[list[str], np.ndarray]:
        """CSV header and rows of the per-horizon table (errored rows are NaN)."""
        m = len(self.b_star)
        header = ["tau", *(f"xi{i + 1}" for i in range(m)), *(f"I{i + 1}" for i in range(m))]
        header += ["normI", "j_gap", "ratio_641"]
        rows = []
        for row in self.table:
            values = row.I if row.I is not None else (np.nan,) * m
            extras = [row.normI, row.j_gap, row.ratio_641]
            rows.append([row.tau, *row.xi, *values, *(np.nan if v is None else v for v in extras)])
        return header, np.array(rows, dtype=float)


class _Classified(NamedTuple):
    classification: Classification
    limit_vector: np.ndarray | None
    residuals: np.ndarray
    direction_residuals: np.ndarray


def _unit_directions(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    return np.divide(values, norms, out=np.zeros_like(values), where=norms > 0)


def classify_sequence(values: Float[np.ndarray, "n m"], config: SweepConfig) -> _Classified:
    """Apply the Cauchy and divergence criteria to the last entries of `values`."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    residuals = successive_differences(values)
    direction_residuals = successive_differences(_unit_directions(values))
    if values.shape[0] < 3:
        return _Classified("Inconclusive", None, residuals, direction_residuals)
    norms = np.linalg.norm(values, axis=-1)
    if np.all(norms < config.divergence_threshold) and np.all(
        residuals[-2:] <= config.cauchy_tol(values[-1])
    ):
        return _Classified("NormalFinite", values[-1], residuals, direction_residuals)
    if np.all(norms[-2:] >= config.divergence_threshold) and np.all(
        direction_residuals[-2:] <= config.eps_lim * 2.0
    ):
        return _Classified(
            "AbnormalUnbounded", _unit_directions(values)[-1], residuals, direction_residuals
        )
    return _Classified("Inconclusive", None, residuals, direction_residuals)


def _subsequence_hint(values: np.ndarray, config: SweepConfig) -> str | None:
    if values.shape[0] < 6:
        return None
    even = classify_sequence(values[0::2], config).classification
    odd = classify_sequence(values[1::2], config).classification
    if even == odd == "Inconclusive":
        return None
    return f"even-indexed horizons classify as {even}, odd-indexed as {odd}"


class BackwardShot(NamedTuple):
    candidate: CostateCandidate | None
    psi0: Float[np.ndarray, " m"]
    path: CovectorPath
    terminal_residual: float
    degenerate: bool


def backward_shot(
    p: ControlProblem,
    xi: ArrayLike,
    u_star: ControlLike,
    lam: float,
    tau: float,
    integrator: IntegratorConfig | None = None,
    shot_index: int | None = None,
) -> BackwardShot:
    """Finite-horizon co-state with `psi(tau) = 0`, so that `psi(0) = -lam * I(xi; tau)`.

    The returned path is integrated backwards from the zero terminal value. The terminal
    residual comes from re-integrating forwards from the closed-form `psi(0)`.
    """
    assert lam >= 0 and tau > 0, f"need lam >= 0 and tau > 0, got {lam}, {tau}"
    xi = as_vector(xi, p.state_dim, "xi")
    sens = integrate_sensitivity(p, xi, u_star, tau, integrator)
    psi0 = -lam * sens.I[-1]
    path = integrate_adjoint(p, sens, u_star, lam, (tau, np.zeros(p.state_dim)), integrator)
    forward = integrate_adjoint(p, sens, u_star, lam, (0.0, psi0), integrator)
    terminal_residual = float(np.linalg.norm(forward.psi[-1]))
    degenerate = lam == 0
    if degenerate:
        logger.warning(f"Degenerate backward shot at tau={tau}: lam = 0 gives psi = 0")
        candidate = None
    else:
        candidate = CostateCandidate(
            lam=lam, psi0=to_tuple(psi0), provenance="backward-shot", shot_index=shot_index
        )
    return BackwardShot(candidate, psi0, path, terminal_residual, degenerate)


def reference_sensitivity(
    p: ControlProblem,
    xi: np.ndarray,
    u_star: ControlLike,
    horizons: Sequence[float],
    integrator: IntegratorConfig | None = None,
) -> tuple[SensitivityPath | None, str | None]:
    """Integrate `xi` through all horizons; on blow-up, stop at the last horizon reached."""
    try:
        return integrate_sensitivity(p, xi, u_star, horizons[-1], integrator, horizons), None
    except IntegrationError as e:
        logger.warning(f"Integration from {xi} failed: {e}")
        reachable = [t for t in horizons if t < e.t]
        if not reachable:
            return None, str(e)
        return (
            integrate_sensitivity(p, xi, u_star, reachable[-1], integrator, reachable),
            str(e),
        )


def horizon_sweep(
    p: ControlProblem,
    b_star: ArrayLike,
    u_star: ControlLike,
    tau: HorizonSequence,
    xi_schedule: Sequence[ArrayLike] | None = None,
    config: SweepConfig | None = None,
    integrator: IntegratorConfig | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> LimitReport:
    """Evaluate `I(xi_n; tau_n)` over the horizon sequence and classify the limit.

    Args:
        p: The problem.
        b_star: Reference initial state.
        u_star: Reference control.
        tau: At least four horizons.
        xi_schedule: Initial states converging to `b_star`, one per horizon (default `b_star`).
        config: Cauchy and divergence thresholds.
        integrator: Integration settings.
        jobs: Threads used for per-horizon integrations of a non-constant schedule.
        progress: Show a progress bar.

    Returns:
        The report. A failed integration marks its row with `error`; classification then uses
        the rows that succeeded.
    """
    assert len(tau) >= 4, f"A sweep needs at least 4 horizons, got {len(tau)}"
    config = config or SweepConfig()
    b_star = as_vector(b_star, p.state_dim, "b_star")
    horizons = list(tau.values)
    if xi_schedule is None:
        xis = np.broadcast_to(b_star, (len(horizons), p.state_dim))
    else:
        assert len(xi_schedule) == len(horizons), "need one xi per horizon"
        xis = np.array([as_vector(x, p.state_dim, "xi") for x in xi_schedule])
    logger.info(f"Sweeping {len(horizons)} horizons up to tau={horizons[-1]:g} on {p.name}")

    ray, ray_error = reference_sensitivity(p, b_star, u_star, horizons, integrator)
    ray_I: dict[float, np.ndarray] = {}
    ray_J: dict[float, float] = {}
    if ray is not None:
        for t in horizons:
            if t <= ray.grid[-1] + 1e-12:
                ray_I[t], ray_J[t] = ray.I_at(t), float(ray.cost_at(t))

    def evaluate(n: int) -> SweepRow:
        t, xi = horizons[n], xis[n]
        if np.array_equal(xi, b_star):
            if t not in ray_I:
                return SweepRow(tau=t, xi=to_tuple(xi), error=ray_error)
            I_n, J_n = ray_I[t], ray_J[t]
        else:
            try:
                path = integrate_sensitivity(p, xi, u_star, t, integrator)
            except IntegrationError as e:
                logger.warning(f"Sweep row tau={t:g} failed: {e}")
                return SweepRow(tau=t, xi=to_tuple(xi), error=str(e))
            I_n, J_n = path.I[-1], float(path.final_cost)
        j_gap = abs(J_n - ray_J[t]) if t in ray_J else None
        ratio = None
        if t in ray_I and np.linalg.norm(ray_I[t]) > 0:
            ratio = float(np.linalg.norm(I_n - ray_I[t]) / np.linalg.norm(ray_I[t]))
        return SweepRow(
            tau=t,
            xi=to_tuple(xi),
            I=to_tuple(I_n),
            normI=float(np.linalg.norm(I_n)),
            j_gap=j_gap,
            ratio_641=ratio,
        )

    table = parallel_map(evaluate, range(len(horizons)), jobs, desc="horizons", progress=progress)
    values = np.array([row.I for row in table if row.I is not None], dtype=float)
    values = values.reshape(-1, p.state_dim)

    verdict = classify_sequence(values, config)
    history = [
        PrefixVerdict(n=n, classification=classify_sequence(values[:n], config).classification)
        for n in range(3, values.shape[0] + 1)
    ]
    hint = None
    if verdict.classification == "Inconclusive":
        hint = _subsequence_hint(values, config)
        logger.warning(f"Sweep inconclusive on {p.name}" + (f" ({hint})" if hint else ""))
    else:
        logger.info(f"Sweep classified {verdict.classification} on {p.name}")
    return LimitReport(
        classification=verdict.classification,
        limit_vector=None if verdict.limit_vector is None else to_tuple(verdict.limit_vector),
        table=table,
        residuals=verdict.residuals.tolist(),
        direction_residuals=verdict.direction_residuals.tolist(),
        history=history,
        subsequence_hint=hint,
        b_star=to_tuple(b_star),
        horizons=tau.generator,
    )


class CandidateVerdict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    candidate: CostateCandidate
    raw_candidate: CostateCandidate
    transversality_distance: float
    transversality_holds: bool


def classify_candidate(
    report: LimitReport,
    l_subdiff: Float[np.ndarray, "n m"],
    normal_cone: NormalCone,
    config: SweepConfig | None = None,
    provenance: Provenance = "backward-shot",
) -> CandidateVerdict:
    """Turn a classified sweep into a normalised candidate and test transversality at `b*`.

    `provenance` records how the limit in `report` was obtained (backward shots for a horizon
    sweep) and is carried by both the raw and the normalised candidate.

    Raises:
        InconclusiveReportError: If the report did not classify.
    """
    config = config or SweepConfig()
    if report.classification == "Inconclusive" or report.limit_vector is None:
        raise InconclusiveReportError("Cannot build a candidate from an Inconclusive sweep")
    limit = np.array(report.limit_vector)
    if report.classification == "NormalFinite":
        lam = 1.0
    else:
        lam = 0.0
    raw = CostateCandidate(lam=lam, psi0=to_tuple(-limit + 0.0), provenance=provenance)
    candidate = raw.normalize()
    distance = transversality_distance(
        candidate.psi0_array, candidate.lam, np.atleast_2d(l_subdiff), normal_cone
    )
    holds = distance <= config.transversality_tol
    if not holds:
        logger.warning(
            f"Transversality fails for the {report.classification} candidate: "
            f"distance {distance:.3g} to lam*dl(b*) + N_C(b*)"
        )
    return CandidateVerdict(
        candidate=candidate,
        raw_candidate=raw,
        transversality_distance=distance,
        transversality_holds=holds,
    )


class AKResult(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    T: float
    psi: Vector
    verdict: Literal["converged", "divergent", "oscillatory"]
    tail_horizons: tuple[float, ...]
    partial_integrals: list[Vector]
    residuals: list[float]

    @property
    def converged(self) -> bool:
        return self.verdict == "converged"


def ak_costate(
    p: ControlProblem,
    b_star: ArrayLike,
    u_star: ControlLike,
    T: float,
    tail: HorizonSequence,
    config: SweepConfig | None = None,
    integrator: IntegratorConfig | None = None,
) -> AKResult:
    """Tail-integral co-state `psi(T) = -(int_T^tau dl0/dx A dt) A_inv(T)` as `tau` grows.

    The partial integrals over `[T, tau_n]` are tested with the Cauchy criterion; the value at
    the largest tail horizon is returned together with the verdict.
    """
    assert T >= 0, f"T must be nonnegative, got {T}"
    assert len(tail) >= 3, "need at least 3 tail horizons"
    assert tail.values[0] > T, f"tail horizons must exceed T={T}"
    config = config or SweepConfig()
    b_star = as_vector(b_star, p.state_dim, "b_star")
    checkpoints = (T, *tail.values) if T > 0 else tail.values
    path = integrate_sensitivity(p, b_star, u_star, tail.last, integrator, checkpoints)
    I_T = path.I_at(T) if T > 0 else np.zeros(p.state_dim)
    A_inv_T = path.A_inv_at(T) if T > 0 else np.eye(p.state_dim)
    partials = np.array([path.I_at(t) - I_T for t in tail.values])

    residuals = successive_differences(partials)
    norm = float(np.linalg.norm(partials[-1]))
    if norm >= config.divergence_threshold:
        verdict = "divergent"
    elif np.all(residuals[-2:] <= config.cauchy_tol(partials[-1])):
        verdict = "converged"
    else:
        verdict = "oscillatory"
    if verdict != "converged":
        logger.warning(f"Tail integral at T={T:g} is {verdict} up to tau={tail.last:g}")
    psi = -partials[-1] @ A_inv_T
    return AKResult(
        T=T,
        psi=to_tuple(psi),
        verdict=verdict,
        tail_horizons=tail.values,
        partial_integrals=[to_tuple(v) for v in partials],
        residuals=residuals.tolist(),
    )


def eval_1ss(
    p: ControlProblem,
    b_star: ArrayLike,
    u_star: ControlLike,
    I_star: ArrayLike,  # noqa: N803
    T: float,
    integrator: IntegratorConfig | None = None,
) -> Float[np.ndarray, " m"]:
    """`psi(T) = (-I_* + I(b*;T)) A_inv(b*;T)` for a finite limit `I_*`."""
    I_star = as_vector(I_star, p.state_dim, "I_star")
    if T == 0:
        return -I_star
    assert T > 0, f"T must be nonnegative, got {T}"
    path = integrate_sensitivity(p, as_vector(b_star, p.state_dim, "b_star"), u_star, T, integrator)
    return (-I_star + path.I[-1]) @ path.A_inv[-1]


def direction_dictionary(m: int, n: int, seed: int) -> Float[np.ndarray, "n m"]:
    """`+e_1, -e_1, ..., +e_m, -e_m`, then seeded random unit vectors, truncated to `n`."""
    signed = np.concatenate([np.eye(m), -np.eye(m)], axis=1).reshape(2 * m, m)
    extra = max(0, n - 2 * m)
    rand = np.random.default_rng(seed).normal(size=(extra, m))
    rand /= np.maximum(np.linalg.norm(rand, axis=-1, keepdims=True), 1e-300)
    return np.concatenate([signed, rand])[:n]


class ProbeSample(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    radius: float
    xi: Vector
    I: list[Vector | None]  # noqa: E741
    error: str | None = None


class JointLimitReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    verdict: Literal["I1-holds", "I1-fails"]
    I_star: Vector | None
    spread: float
    tolerance: float
    horizons: tuple[float, ...]
    radii: tuple[float, ...]
    samples: list[ProbeSample]


class SampledSensitivities(NamedTuple):
    """`I` has shape `(S, N, m)` and `J` shape `(S, N)`; entries past a failure are NaN."""

    I: np.ndarray  # noqa: E741
    J: np.ndarray
    errors: list[str | None]


def sample_sensitivities(
    p: ControlProblem,
    xis: Float[np.ndarray, "S m"],
    u_star: ControlLike,
    tau: HorizonSequence,
    integrator: IntegratorConfig | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> SampledSensitivities:
    """`I(xi_s; tau_n)` and `J(xi_s, u*; tau_n)` for every sample and horizon.

    All samples go through one batched integration; if that fails, each sample is integrated
    on its own and keeps the horizons it reached.
    """
    S, N = xis.shape[0], len(tau)
    out_I = np.full((S, N, p.state_dim), np.nan)
    out_J = np.full((S, N), np.nan)
    errors: list[str | None] = [None] * S
    try:
        path = integrate_sensitivity(p, xis, u_star, tau.last, integrator, tau.values)
        for n, t in enumerate(tau.values):
            out_I[:, n], out_J[:, n] = path.I_at(t), path.cost_at(t)
        return SampledSensitivities(out_I, out_J, errors)
    except IntegrationError as e:
        logger.warning(f"Batched probe integration failed ({e}); retrying sample by sample")

    def one(s: int) -> tuple[SensitivityPath | None, str | None]:
        return reference_sensitivity(p, xis[s], u_star, tau.values, integrator)

    results = parallel_map(one, range(S), jobs, desc="samples", progress=progress)
    for s, (path, error) in enumerate(results):
        errors[s] = error
        if path is None:
            continue
        for n, t in enumerate(tau.values):
            if t <= path.grid[-1] + 1e-12:
                out_I[s, n], out_J[s, n] = path.I_at(t), path.cost_at(t)
    return SampledSensitivities(out_I, out_J, errors)


def _probe_points(
    b_star: np.ndarray, radii: Sequence[float], samples_per_radius: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    assert all(r > 0 for r in radii), f"radii must be positive, got {radii}"
    assert all(b < a for a, b in zip(radii[:-1], radii[1:], strict=True)), "radii must decrease"
    dirs = direction_dictionary(b_star.shape[0], samples_per_radius, seed)
    xis = [b_star + r * d for r in radii for d in dirs]
    rs = [r for r in radii for _ in dirs]
    return np.array(xis).reshape(-1, b_star.shape[0]), np.array(rs)


def joint_limit_probe(
    p: ControlProblem,
    b_star: ArrayLike,
    u_star: ControlLike,
    tau: HorizonSequence,
    radii: Sequence[float] = (0.5, 0.25, 0.125, 0.0625),
    samples_per_radius: PositiveInt = 8,
    seed: int = 0,
    config: SweepConfig | None = None,
    integrator: IntegratorConfig | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> JointLimitReport:
    """Sample `I(xi; tau_n)` for `xi` in shrinking balls around `b*` and test the joint limit.

    The verdict is `I1-holds` when the cloud at the smallest radius and largest horizon (the
    reference point included) has diameter within the Cauchy tolerance of its centroid.
    """
    config = config or SweepConfig()
    b_star = as_vector(b_star, p.state_dim, "b_star")
    xis, rs = _probe_points(b_star, radii, samples_per_radius, seed)
    xis = np.concatenate([b_star[None], xis])
    rs = np.concatenate([[0.0], rs])
    logger.info(f"Joint-limit probe on {p.name}: {xis.shape[0]} samples, {len(tau)} horizons")
    values, _, errors = sample_sensitivities(p, xis, u_star, tau, integrator, jobs, progress)

    last = (rs == 0.0) | (rs == radii[-1]) if len(radii) else rs == 0.0
    cloud = values[last, -1]
    if np.any(~np.isfinite(cloud)):
        spread, centroid = float("inf"), None
    else:
        diffs = cloud[:, None, :] - cloud[None, :, :]
        spread = float(np.max(np.linalg.norm(diffs, axis=-1)))
        centroid = cloud.mean(axis=0)
    tol = config.cauchy_tol(centroid) if centroid is not None else config.eps_lim
    holds = centroid is not None and spread <= tol
    if not holds:
        logger.warning(f"Joint limit fails at budget: spread {spread:.3g} > {tol:.3g}")
    samples = [
        ProbeSample(
            radius=float(rs[s]),
            xi=to_tuple(xis[s]),
            I=[to_tuple(v) if np.all(np.isfinite(v)) else None for v in values[s]],
            error=errors[s],
        )
        for s in range(xis.shape[0])
    ]
    return JointLimitReport(
        verdict="I1-holds" if holds else "I1-fails",
        I_star=to_tuple(centroid) if holds and centroid is not None else None,
        spread=spread,
        tolerance=tol,
        horizons=tau.values,
        radii=tuple(radii),
        samples=samples,
    )


class Cluster(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    centroid: Vector
    size: int
    spread: float
    horizons: tuple[float, ...]


class InfinityGradients(BaseModel):
    """Clustered approximations of the proper and singular subdifferentials at infinity.

    Clusters summarise a finite sample; they are evidence about the sets, not the sets.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)
    proper: list[Cluster]
    singular: list[Cluster]
    status: Literal["clusters found", "empty at this budget"]
    tolerance: float
    candidate_consistent: bool | None = None


def _cluster(
    points: np.ndarray, horizons: np.ndarray, tol: float, min_horizons: int
) -> list[Cluster]:
    if points.shape[0] == 0:
        return []
    if points.shape[0] == 1:
        labels = np.ones(1, dtype=int)
    else:
        labels = fcluster(linkage(points, method="single"), t=tol, criterion="distance")
    clusters = []
    for label in np.unique(labels):
        members = points[labels == label]
        taus = tuple(sorted(set(horizons[labels == label].tolist())))
        if len(taus) < min_horizons:
            continue
        centroid = members.mean(axis=0)
        clusters.append(
            Cluster(
                centroid=to_tuple(centroid),
                size=int(members.shape[0]),
                spread=float(np.max(np.linalg.norm(members - centroid, axis=-1))),
                horizons=taus,
            )
        )
    return sorted(clusters, key=lambda c: c.centroid)


def gradients_at_infinity(
    p: ControlProblem,
    b_star: ArrayLike,
    u_star: ControlLike,
    tau: HorizonSequence,
    radii: Sequence[float] = (0.5, 0.25, 0.125, 0.0625),
    samples_per_radius: PositiveInt = 8,
    seed: int = 0,
    config: SweepConfig | None = None,
    integrator: IntegratorConfig | None = None,
    candidate: CostateCandidate | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> InfinityGradients:
    """Approximate the subdifferentials of `-J` at `(b*, infinity)` along `tau`.

    Proper points are `-I(xi; t)` with bounded norm, taken from the reference ray and the two
    smallest radii at the two largest horizons; a cluster must span at least two horizons to
    count as an accumulation point. Singular directions are the origin plus the clustered
    `-I/||I||` of samples past the divergence threshold.

    When `candidate` is given, it is cross-checked: a normal candidate's `psi(0)/lam` must lie
    near a proper cluster, an abnormal candidate's direction near a nonzero singular cluster.
    """
    config = config or SweepConfig()
    b_star = as_vector(b_star, p.state_dim, "b_star")
    xis, rs = _probe_points(b_star, radii, samples_per_radius, seed)
    keep = np.isin(rs, radii[-2:]) if len(radii) else np.zeros(0, dtype=bool)
    xis = np.concatenate([b_star[None], xis[keep]])
    values = sample_sensitivities(p, xis, u_star, tau, integrator, jobs, progress).I

    last = slice(max(0, len(tau) - 2), len(tau))
    pts = -values[:, last].reshape(-1, p.state_dim)
    hs = np.tile(np.array(tau.values)[last], xis.shape[0])
    finite = np.all(np.isfinite(pts), axis=-1)
    pts, hs = pts[finite], hs[finite]
    norms = np.linalg.norm(pts, axis=-1)
    bounded = norms < config.divergence_threshold

    max_norm = float(norms[bounded].max()) if np.any(bounded) else 0.0
    tol = config.eps_lim * (1.0 + max_norm)
    min_horizons = min(2, len(tau))
    proper = _cluster(pts[bounded], hs[bounded], tol, min_horizons)

    directions = pts[~bounded] / norms[~bounded, None]
    singular = [Cluster(centroid=(0.0,) * p.state_dim, size=1, spread=0.0, horizons=())]
    singular += _cluster(directions, hs[~bounded], config.eps_lim * 2.0, 1)

    status = "clusters found" if proper else "empty at this budget"
    if not proper:
        logger.warning(f"No bounded accumulation point of -I near b* on {p.name} at this budget")

    consistent = None
    if candidate is not None:
        psi0 = candidate.psi0_array
        if candidate.lam > 0:
            target, pool, ctol = psi0 / candidate.lam, proper, tol
        else:
            target, pool, ctol = psi0 / np.linalg.norm(psi0), singular[1:], config.eps_lim * 2.0
        consistent = any(
            np.linalg.norm(np.array(c.centroid) - target) <= ctol + c.spread for c in pool
        )
    return InfinityGradients(
        proper=proper,
        singular=singular,
        status=status,
        tolerance=tol,
        candidate_consistent=consistent,
    )

