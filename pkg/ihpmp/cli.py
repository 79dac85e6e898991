"""Command-line front end.

Usage:
    ihpmp <subcommand> [--config run.yaml] [--flag value ...]

Subcommands: analyze, sweep-horizons, check-pmp, ak, metric, example-bolza, probes. Flags override
the fields of `RunConfig` (loaded from `--config` when given); `--tol-adjoint`, `--tol-max`,
`--eps-lim`, `--step`, `--method`, `--omega` and `--lambda` are shortcuts for nested fields.
Every run writes `report.json`, its CSV tables and `final_config.yaml` to `<out_dir>/<run_name>/`.

Exit codes: 0 pass, 2 verdict failure, 3 integration failure, 4 usage error.
"""

import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Self

import fire
import numpy as np
import wandb
from fire.core import FireExit
from pydantic import (
    BaseModel,
    ConfigDict,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    field_validator,
    model_validator,
)

from ihpmp.cones import NormalCone
from ihpmp.control_metric import (
    ContextSummary,
    MetricConfig,
    RhoValue,
    TrialsReport,
    build_context,
    divergence_trials,
    extended_field,
    extended_initial_box,
    rho,
    rho_profile,
)
from ihpmp.costate import (
    AKResult,
    CandidateVerdict,
    CostateCandidate,
    HorizonSequence,
    InconclusiveReportError,
    InfinityGradients,
    JointLimitReport,
    LimitReport,
    SweepConfig,
    ak_costate,
    classify_candidate,
    gradients_at_infinity,
    horizon_sweep,
    joint_limit_probe,
)
from ihpmp.experiments.bolza.bolza_example import (
    BolzaExampleConfig,
    ExampleReport,
    run_example,
    write_artifacts,
)
from ihpmp.expressions import ArityError, ExpressionSyntaxError, UnknownIdentifierError
from ihpmp.integrate import IntegrationError, IntegratorConfig
from ihpmp.log import logger
from ihpmp.pmp_check import (
    Condition620Report,
    EquicontinuityReport,
    ModulusViolation,
    PMPReport,
    PMPTolerances,
    check_pmp,
    condition_620_probe,
    equicontinuity_probe,
    omega_modulus_check,
)
from ihpmp.problems.base import ControlProblem, ControlSignal
from ihpmp.problems.registry import ProblemSpecError
from ihpmp.problems.spec import ProblemSpec, load_problem
from ihpmp.settings import DEFAULT_OUT_DIR
from ihpmp.types import RootPath, Vector
from ihpmp.utils import (
    as_vector,
    load_config,
    replace_pydantic_model,
    save_csv,
    set_seed,
    write_json,
    write_yaml,
)
from ihpmp.wandb_utils import init_wandb, log_report

EXIT_PASS = 0
EXIT_VERDICT_FAIL = 2
EXIT_NUMERICAL = 3
EXIT_USAGE = 4

USAGE_ERRORS = (
    ValidationError,
    ProblemSpecError,
    ExpressionSyntaxError,
    UnknownIdentifierError,
    ArityError,
    FileNotFoundError,
    AssertionError,
    ValueError,
)

# Flag shortcuts for nested fields
ALIASES: dict[str, tuple[str, str]] = {
    "tol_adjoint": ("pmp", "adjoint"),
    "tol_max": ("pmp", "max_condition"),
    "eps_lim": ("sweep", "eps_lim"),
    "step": ("integrator", "step"),
    "method": ("integrator", "method"),
    "omega": ("probes", "omega"),
}

ProbeKind = Literal["joint-limit", "gradients", "condition-620", "equicontinuity", "omega"]


class ProbeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    kinds: tuple[ProbeKind, ...] = ("joint-limit", "gradients", "condition-620", "equicontinuity")
    radii: tuple[PositiveFloat, ...] = (0.5, 0.25, 0.125, 0.0625)
    samples_per_radius: PositiveInt = 8
    radius: PositiveFloat = 0.1
    samples: PositiveInt = 16
    n_deltas: PositiveInt = 4
    b_offset: PositiveFloat = 0.5  # b_n = b* + b_offset / tau_n, clipped into the initial set
    omega: str | None = None
    omega_samples: NonNegativeInt = 0

    @model_validator(mode="after")
    def validate_omega(self) -> Self:
        if "omega" in self.kinds and self.omega is None:
            raise ValueError("The omega probe needs an omega expression (--omega)")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    wandb_project: str | None = None  # The name of the wandb project (if None, don't log to wandb)
    run_name: str | None = None
    out_dir: RootPath | None = None
    seed: NonNegativeInt = 0
    jobs: PositiveInt = 1
    progress: bool = False
    problem: str = "bolza-example"  # Registry name or path to a YAML/JSON problem spec
    params: dict[str, float] = {}
    b_star: Vector | None = None
    u_star: str | float | Vector | None = None  # CSV path or a constant value
    tau: str = "geometric:1:2:7"
    T: PositiveFloat = 10.0
    tail: str | None = None
    lam: NonNegativeFloat = 1.0
    psi0: Vector | None = None
    u: str | None = None
    v: str | None = None
    extended_radius: PositiveFloat = 2.0
    trials: NonNegativeInt = 0
    integrator: IntegratorConfig = IntegratorConfig()
    sweep: SweepConfig = SweepConfig()
    pmp: PMPTolerances = PMPTolerances()
    metric: MetricConfig = MetricConfig()
    probes: ProbeConfig = ProbeConfig()
    example: BolzaExampleConfig = BolzaExampleConfig()

    @field_validator("b_star", "psi0", mode="before")
    @classmethod
    def wrap_scalar(cls, v: Any) -> Any:
        return (v,) if isinstance(v, int | float) else v

    @field_validator("u_star", mode="before")
    @classmethod
    def keep_scalar(cls, v: Any) -> Any:
        return float(v) if isinstance(v, int) and not isinstance(v, bool) else v


def flag_overrides(flags: dict[str, Any]) -> dict[str, Any]:
    """Turn parsed flags into a nested update of `RunConfig`."""
    updates: dict[str, Any] = {}
    for key, value in flags.items():
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        if key in ALIASES:
            section, name = ALIASES[key]
            updates.setdefault(section, {})[name] = value
        else:
            updates[key] = value
    return updates


def resolve_config(config: str | None, flags: dict[str, Any]) -> RunConfig:
    base = load_config(config, RunConfig) if config is not None else RunConfig()
    return replace_pydantic_model(base, flag_overrides(flags))


def load_run_problem(config: RunConfig) -> ControlProblem:
    path = Path(config.problem)
    if path.suffix in (".json", ".yaml", ".yml"):
        if config.params:
            raise ValueError("--params only applies to registry problems")
        return load_problem(path)
    return load_problem(ProblemSpec(name=config.problem, params=config.params))


def load_control(value: str | float | Vector | None, dim: int) -> ControlSignal:
    if value is None:
        return ControlSignal.constant(np.zeros(dim))
    if isinstance(value, str):
        signal = ControlSignal.from_csv(value)
    else:
        signal = ControlSignal.constant(as_vector(value, dim, "control"))
    if signal.control_dim != dim:
        raise ValueError(f"Control has {signal.control_dim} components, expected {dim}")
    return signal


def reference(config: RunConfig, p: ControlProblem) -> tuple[np.ndarray, ControlSignal]:
    b_star = as_vector(
        config.b_star if config.b_star is not None else 0.0, p.state_dim, "b_star"
    )
    return b_star, load_control(config.u_star, p.control_dim)


class AnalyzeReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    problem: str
    sweep: LimitReport
    candidate: CandidateVerdict | None
    pmp: PMPReport | None
    ak: AKResult | None
    passed: bool


class MetricReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    rho: RhoValue
    context: ContextSummary
    trials: TrialsReport | None = None


class ProbesReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    joint_limit: JointLimitReport | None = None
    gradients: InfinityGradients | None = None
    condition_620: Condition620Report | None = None
    equicontinuity: EquicontinuityReport | None = None
    omega_violations: list[ModulusViolation] | None = None
    passed: bool


@dataclass(frozen=True)
class Outcome:
    """What a subcommand produced: its report, extra CSV tables and the exit code."""

    report: BaseModel
    code: int
    summary: str
    tables: dict[str, tuple[list[str], np.ndarray]] = field(default_factory=dict)
    write: Callable[[Path], Path] | None = None


def _sweep(config: RunConfig, p: ControlProblem, b_star, u_star) -> LimitReport:
    return horizon_sweep(
        p,
        b_star,
        u_star,
        HorizonSequence.parse(config.tau),
        config=config.sweep,
        integrator=config.integrator,
        jobs=config.jobs,
        progress=config.progress,
    )


def _tail(config: RunConfig, T: float) -> HorizonSequence:
    if config.tail is not None:
        return HorizonSequence.parse(config.tail)
    return HorizonSequence.geometric(1.0, 2.0, 7).shifted(T)


def _pmp_rows(report: PMPReport) -> tuple[list[str], np.ndarray]:
    m = len(report.candidate.psi0)
    header = ["t", *(f"psi{i + 1}" for i in range(m)), "max_residual"]
    rows = np.column_stack(
        [report.profile_t, np.array(report.profile_psi).reshape(-1, m), report.profile_residual]
    )
    return header, rows


def analyze(config: RunConfig) -> Outcome:
    """Sweep, build and normalise the candidate, check the PMP and evaluate the tail formula."""
    p = load_run_problem(config)
    b_star, u_star = reference(config, p)
    sweep = _sweep(config, p, b_star, u_star)
    candidate = pmp = ak = None
    if sweep.classification != "Inconclusive":
        cone = NormalCone.at(p.initial_set, b_star)
        candidate = classify_candidate(
            sweep, p.l_subgradients(b_star), cone, config.sweep, provenance="backward-shot"
        )
        pmp = check_pmp(
            p, b_star, u_star, candidate.candidate, config.T, config.pmp, config.integrator
        )
        ak = ak_costate(
            p, b_star, u_star, 0.0, _tail(config, 0.0), config.sweep, config.integrator
        )
    passed = (
        candidate is not None
        and candidate.transversality_holds
        and pmp is not None
        and pmp.passed
    )
    report = AnalyzeReport(
        problem=p.name, sweep=sweep, candidate=candidate, pmp=pmp, ak=ak, passed=passed
    )
    tables = {"sweep.csv": sweep.to_rows()}
    if pmp is not None:
        tables["pmp_profile.csv"] = _pmp_rows(pmp)
    summary = f"{p.name}: sweep {sweep.classification}, " + (
        f"PMP {'pass' if passed else 'FAIL'}, AK {ak.verdict}" if ak is not None else "no candidate"
    )
    return Outcome(
        report=report,
        code=EXIT_PASS if passed else EXIT_VERDICT_FAIL,
        summary=summary,
        tables=tables,
    )


def sweep_horizons(config: RunConfig) -> Outcome:
    p = load_run_problem(config)
    b_star, u_star = reference(config, p)
    report = _sweep(config, p, b_star, u_star)
    summary = f"{p.name}: {report.classification}, limit {report.limit_vector}"
    if report.subsequence_hint:
        summary += f" ({report.subsequence_hint})"
    return Outcome(
        report=report,
        code=EXIT_VERDICT_FAIL if report.classification == "Inconclusive" else EXIT_PASS,
        summary=summary,
        tables={"sweep.csv": report.to_rows()},
    )


def check_pmp_command(config: RunConfig) -> Outcome:
    p = load_run_problem(config)
    b, u = reference(config, p)
    psi0 = as_vector(config.psi0 if config.psi0 is not None else 0.0, p.state_dim, "psi0")
    candidate = CostateCandidate(lam=config.lam, psi0=tuple(psi0.tolist()), provenance="user")
    report = check_pmp(p, b, u, candidate, config.T, config.pmp, config.integrator)
    summary = (
        f"{p.name}: PMP {'pass' if report.passed else 'FAIL'} "
        f"(adjoint {report.adjoint_residual:.3g}, max condition "
        f"{report.max_condition_residual:.3g} at t={report.max_condition_worst_time:g}, "
        f"transversality {report.transversality_distance:.3g})"
    )
    return Outcome(
        report=report,
        code=EXIT_PASS if report.passed else EXIT_VERDICT_FAIL,
        summary=summary,
        tables={"pmp_profile.csv": _pmp_rows(report)},
    )


def ak(config: RunConfig) -> Outcome:
    p = load_run_problem(config)
    b_star, u_star = reference(config, p)
    T = config.T
    report = ak_costate(p, b_star, u_star, T, _tail(config, T), config.sweep, config.integrator)
    header = ["tau", *(f"partial{i + 1}" for i in range(p.state_dim))]
    rows = np.column_stack([report.tail_horizons, np.array(report.partial_integrals)])
    return Outcome(
        report=report,
        code=EXIT_PASS if report.converged else EXIT_VERDICT_FAIL,
        summary=f"{p.name}: psi_AK({T:g}) = {report.psi} ({report.verdict})",
        tables={"ak_tail.csv": (header, rows)},
    )


def metric(config: RunConfig) -> Outcome:
    if config.u is None or config.v is None:
        raise ValueError("metric needs two control files (--u and --v)")
    p = load_run_problem(config)
    u = load_control(config.u, p.control_dim)
    v = load_control(config.v, p.control_dim)
    u_star = u if config.u_star is None else load_control(config.u_star, p.control_dim)
    b_star = as_vector(
        config.b_star if config.b_star is not None else 0.0, p.state_dim, "b_star"
    )
    box = extended_initial_box(b_star, config.extended_radius)
    ctx = build_context(
        extended_field(p), u_star, box, config.T, config.metric, config.integrator
    )
    value = rho(ctx, u, v, config.T)
    trials = None
    if config.trials:
        trials = divergence_trials(
            ctx, config.trials, min(1.0, config.T), config.seed, integrator=config.integrator
        )
    times = np.linspace(0.0, config.T, 65)
    profile = rho_profile(ctx, u, v, times)
    summary = f"rho(u, v; {config.T:g}) = {value.value:.6g}, disagreement {value.disagreement:.3g}"
    if trials is not None:
        summary += f", trials {trials.guarded}/{trials.attempted} guarded, hold={trials.all_hold}"
    passed = trials is None or trials.all_hold
    return Outcome(
        report=MetricReport(rho=value, context=ctx.summary(), trials=trials),
        code=EXIT_PASS if passed else EXIT_VERDICT_FAIL,
        summary=summary,
        tables={"rho_profile.csv": (["t", "rho"], np.column_stack([times, profile]))},
    )


def example_bolza(config: RunConfig) -> Outcome:
    example = config.example.model_copy(
        update={
            "seed": config.seed,
            "integrator": config.integrator,
            "tolerances": config.pmp,
            "progress": config.progress,
        }
    )
    report: ExampleReport = run_example(example)
    return Outcome(
        report=report,
        code=EXIT_PASS if report.passed else EXIT_VERDICT_FAIL,
        summary=f"bolza-example: I_* = {report.I_star:.8f}, passed={report.passed}",
        write=lambda out_dir: write_artifacts(report, out_dir),
    )


def _probe_verdict(result: Any) -> str:
    if isinstance(result, list):
        return f"{len(result)} violations"
    if isinstance(result, InfinityGradients):
        return result.status
    return result.verdict


def probes(config: RunConfig) -> Outcome:
    p = load_run_problem(config)
    b_star, u_star = reference(config, p)
    tau = HorizonSequence.parse(config.tau)
    pc = config.probes
    common = {"integrator": config.integrator, "jobs": config.jobs}
    results: dict[str, Any] = {}
    if "joint-limit" in pc.kinds:
        results["joint_limit"] = joint_limit_probe(
            p, b_star, u_star, tau, pc.radii, pc.samples_per_radius, config.seed, config.sweep,
            progress=config.progress, **common,
        )
    if "gradients" in pc.kinds:
        results["gradients"] = gradients_at_infinity(
            p, b_star, u_star, tau, pc.radii, pc.samples_per_radius, config.seed, config.sweep,
            progress=config.progress, **common,
        )
    if "condition-620" in pc.kinds:
        b_sequence = [
            p.initial_set.clip(b_star + pc.b_offset / t) for t in tau.values
        ]
        results["condition_620"] = condition_620_probe(
            p, b_star, u_star, tau, b_sequence, config.pmp, config.integrator
        )
    if "equicontinuity" in pc.kinds:
        results["equicontinuity"] = equicontinuity_probe(
            p, b_star, u_star, tau, pc.radius, pc.samples, config.seed, pc.n_deltas, config.pmp,
            **common,
        )
    if "omega" in pc.kinds:
        assert pc.omega is not None
        results["omega_violations"] = omega_modulus_check(
            p, b_star, u_star, tau, pc.omega, pc.omega_samples, pc.radius, config.seed,
            config.pmp, **common,
        )
    passed = (
        ("joint_limit" not in results or results["joint_limit"].verdict == "I1-holds")
        and (
            "condition_620" not in results
            or results["condition_620"].verdict != "inconsistent at budget"
        )
        and (
            "equicontinuity" not in results
            or results["equicontinuity"].verdict == "equicontinuous at budget"
        )
        and not results.get("omega_violations")
    )
    report = ProbesReport(**results, passed=passed)
    summary = ", ".join(f"{name}: {_probe_verdict(r)}" for name, r in results.items())
    return Outcome(
        report=report,
        code=EXIT_PASS if passed else EXIT_VERDICT_FAIL,
        summary=f"{p.name} probes - {summary}",
    )


COMMANDS: dict[str, Callable[[RunConfig], Outcome]] = {
    "analyze": analyze,
    "sweep-horizons": sweep_horizons,
    "check-pmp": check_pmp_command,
    "ak": ak,
    "metric": metric,
    "example-bolza": example_bolza,
    "probes": probes,
}


def execute(name: str, config: RunConfig) -> int:
    """Run one subcommand and persist its report, tables and effective config."""
    if config.wandb_project:
        config = init_wandb(config, config.wandb_project, name=config.run_name)
    set_seed(config.seed)
    logger.info(config)

    outcome = COMMANDS[name](config)

    out_dir = (config.out_dir or DEFAULT_OUT_DIR) / (config.run_name or name)
    if outcome.write is not None:
        outcome.write(out_dir)
    else:
        write_json(out_dir / "report.json", outcome.report)
    for filename, (header, rows) in outcome.tables.items():
        save_csv(out_dir / filename, header, rows)
    write_yaml(out_dir / "final_config.yaml", config)

    logger.info(outcome.summary)
    logger.info(f"Saved report to {out_dir}")
    if config.wandb_project:
        log_report(outcome.report, out_dir)
        wandb.finish()
    return outcome.code


def _command(name: str, codes: list[int]) -> Callable[..., None]:
    def command(config: str | None = None, **flags: Any) -> None:
        codes.append(execute(name, resolve_config(config, flags)))

    command.__name__ = name.replace("-", "_")
    command.__doc__ = COMMANDS[name].__doc__
    return command


def run(argv: Sequence[str]) -> int:
    """Parse `argv`, run the subcommand and return its exit code."""
    argv = list(argv)
    if argv and argv[0] in ("-h", "--help"):
        logger.info(__doc__)
        return EXIT_PASS
    if not argv or argv[0] not in COMMANDS:
        logger.error(f"Expected a subcommand from {sorted(COMMANDS)}, got {argv[:1]}")
        return EXIT_USAGE

    codes: list[int] = []
    commands = {name: _command(name, codes) for name in COMMANDS}
    try:
        fire.Fire(commands, command=argv, name="ihpmp")
    except FireExit as e:
        return EXIT_PASS if e.code == 0 else EXIT_USAGE
    except IntegrationError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except InconclusiveReportError as e:
        logger.error(f"Inconclusive: {e}")
        return EXIT_VERDICT_FAIL
    except USAGE_ERRORS as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    if not codes:
        return EXIT_USAGE
    return codes[-1]


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
