"""Command line interface: ``holosde {simulate,converge,compare,validate} --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 failed
validation.
"""

from __future__ import annotations

import argparse
import dataclasses
import inspect
import json
import logging
import os
import sys
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from holosde.errors import HolosdeError, StepError, StudyAborted
from holosde.experiments import (
    convergence_study,
    integrate,
    scheme_comparison,
    trajectory_rows,
    write_csv,
)
from holosde.geometry import check_derivatives, estimate_cg, project_to_manifold, tangent_projection
from holosde.model import (
    INITIAL_TOL,
    SdaeProblem,
    State,
    check_growth,
    make_fiber_chain,
    make_pendulum,
    make_sphere_langevin,
)
from holosde.stepper import StepperConfig
from holosde.stochastics import sample_path

log = logging.getLogger("holosde")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VALIDATION = 0, 2, 3, 4

MODELS = {
    "pendulum": make_pendulum,
    "sphere_langevin": make_sphere_langevin,
    "fiber": make_fiber_chain,
}


class ConfigError(HolosdeError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


# ---------------------------------------------------------------------------
# schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSpec(_Strict):
    name: Literal["pendulum", "sphere_langevin", "fiber"]
    params: dict = Field(default_factory=dict)


class StepperSpec(_Strict):
    newton_tol: float = Field(1e-12, gt=0)
    newton_max_iter: int = Field(25, ge=1)
    homotopy_max_depth: int = Field(10, ge=0)
    kappa_bound_mode: Literal["enforce", "warn"] = "enforce"
    gram_cond_limit: float = Field(1e12, gt=0)
    tangency_tol: float = Field(1e-10, gt=0)


class ValidateSpec(_Strict):
    samples: int = Field(64, ge=1)
    fd_step: float = Field(1e-5, gt=0)
    growth_radius: float = Field(10.0, gt=0)
    cg_margin: float = Field(0.5, ge=0)
    # exit code used when the configured c_g is below the sampled estimate
    cg_below_estimate_exit: int = Field(0, ge=0, le=255)


class RunConfig(_Strict):
    model: ModelSpec
    T: float = Field(gt=0)
    N: Optional[int] = Field(None, ge=1)
    resolutions: Optional[list[int]] = None
    N_ref: Optional[int] = Field(None, ge=1)
    samples: Optional[int] = None
    p: float = Field(2.0, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    interp: Literal["constant", "linear"] = "constant"
    threads: int = Field(1, ge=1)
    chunk_size: int = Field(50, ge=1)
    output: str = "out"
    stepper: StepperSpec = Field(default_factory=StepperSpec)
    validate_opts: ValidateSpec = Field(default_factory=ValidateSpec, alias="validate")

    @field_validator("resolutions")
    @classmethod
    def _positive_increasing(cls, v):
        if v is not None:
            if not v or any(n < 1 for n in v):
                raise ValueError("must be a non-empty list of positive integers")
            if any(b <= a for a, b in zip(v, v[1:])):
                raise ValueError("must be strictly increasing")
        return v


def _require(cfg: RunConfig, key: str):
    val = getattr(cfg, key)
    if val is None:
        raise ConfigError(key, "required for this command")
    return val


def load_config(path: str, overrides: Optional[dict] = None) -> RunConfig:
    """Parse and validate a YAML config; ``overrides`` replace top-level keys."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(x) for x in err["loc"]) or "<root>"
        raise ConfigError(key, err["msg"]) from exc


def build_problem(cfg: RunConfig, check_initial: bool = True) -> SdaeProblem:
    factory = MODELS[cfg.model.name]
    params = dict(cfg.model.params)
    allowed = set(inspect.signature(factory).parameters) - {"check_initial"}
    for key in params:
        if key not in allowed:
            raise ConfigError(f"model.params.{key}", f"unknown parameter for model '{cfg.model.name}'")
    try:
        return factory(**params, check_initial=check_initial)
    except (TypeError, ValueError) as exc:
        raise ConfigError("model.params", str(exc)) from exc


def stepper_config(cfg: RunConfig) -> StepperConfig:
    return StepperConfig(**cfg.stepper.model_dump())


def _config_echo(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json", by_alias=True)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> int:
    n = _require(cfg, "N")
    problem = build_problem(cfg)
    path = sample_path(problem.ell, cfg.T, n, cfg.seed, 0)
    traj = integrate(problem, stepper_config(cfg), n, path)
    os.makedirs(cfg.output, exist_ok=True)
    out = os.path.join(cfg.output, "trajectory.csv")
    write_csv(out, trajectory_rows(traj))
    log.info("wrote %s (%d rows)", out, n + 1)
    return EXIT_OK


def _check_study(cfg: RunConfig, min_samples: int):
    res = _require(cfg, "resolutions")
    samples = _require(cfg, "samples")
    if samples < min_samples:
        raise ConfigError("samples", f"must be >= {min_samples}")
    return res, samples


def cmd_converge(cfg: RunConfig) -> int:
    res, samples = _check_study(cfg, 2)
    n_ref = _require(cfg, "N_ref")
    bad = [n for n in res if n_ref % n]
    if bad:
        raise ConfigError("N_ref", f"{n_ref} is not a multiple of resolutions {bad}")
    problem = build_problem(cfg)
    report = convergence_study(
        problem,
        stepper_config(cfg),
        res,
        n_ref,
        samples,
        cfg.p,
        cfg.seed,
        T=cfg.T,
        interp=cfg.interp,
        threads=cfg.threads,
        chunk_size=cfg.chunk_size,
    )
    os.makedirs(cfg.output, exist_ok=True)
    write_csv(os.path.join(cfg.output, "convergence.csv"), report.rows())
    _write_json(os.path.join(cfg.output, "convergence.json"), {"config": _config_echo(cfg), "report": report.summary()})
    for comp in ("rv", "mu"):
        log.info("%s: errors %s slope %.3f", comp, np.array2string(report.errors[comp], precision=4), report.slope(comp))
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    res, samples = _check_study(cfg, 1)
    problem = build_problem(cfg)
    report = scheme_comparison(
        problem,
        stepper_config(cfg),
        res,
        samples,
        cfg.seed,
        T=cfg.T,
        p=cfg.p,
        threads=cfg.threads,
        chunk_size=cfg.chunk_size,
    )
    os.makedirs(cfg.output, exist_ok=True)
    write_csv(os.path.join(cfg.output, "comparison.csv"), report.rows())
    _write_json(
        os.path.join(cfg.output, "comparison.json"),
        {
            "config": _config_echo(cfg),
            "baseline_failures": [int(x) for x in report.baseline_failures],
            "constrained_failures": [int(x) for x in report.constrained_failures],
        },
    )
    return EXIT_OK


@dataclasses.dataclass
class CheckResult:
    name: str
    status: str  # "pass", "fail" or "warn"
    detail: str


def _manifold_samples(problem: SdaeProblem, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    geo = problem.geometry
    base = problem.initial.r
    if np.linalg.norm(geo.g(base)) > 1e-6:
        base = project_to_manifold(geo, base)
    out = []
    for _ in range(count):
        x = base + 0.5 * rng.standard_normal(geo.n)
        out.append(project_to_manifold(geo, x))
    return out


def validate_problem(
    problem: SdaeProblem,
    *,
    samples: int = 64,
    seed: int = 0,
    fd_step: float = 1e-5,
    growth_radius: float = 10.0,
    cg_margin: float = 0.5,
) -> list[CheckResult]:
    """Sampled checks of the structural assumptions on a problem.

    Derivatives of ``g`` against finite differences, growth bounds of ``a``
    and ``B`` on random states with norm at most ``growth_radius``, the
    initial state lying on the tangent bundle, and the configured ``c_g``
    against a sampled estimate (a shortfall is reported as ``warn``).
    """
    geo = problem.geometry
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xC0FFEE,)))
    results = []

    # derivative samples around the initial position do not rely on projecting
    # with dg, so a broken dg is reported as such
    ambient = [problem.initial.r + 0.3 * rng.standard_normal(geo.n) for _ in range(max(1, samples // 2))]
    try:
        manifold = _manifold_samples(problem, samples, rng)
    except HolosdeError as exc:
        manifold = []
        results.append(CheckResult("manifold_sampling", "fail", str(exc)))
    near = [x + 0.1 * geo.epsilon * rng.standard_normal(geo.n) / np.sqrt(geo.n) for x in manifold[: max(1, samples // 4)]]

    rep = check_derivatives(geo, ambient + manifold + near, fd_step)
    worst = float(max(rep.dg_errors.max(), rep.d2g_errors.max()))
    results.append(
        CheckResult(
            "derivatives",
            "pass" if rep.passed else "fail",
            f"max relative error {worst:.2e} (tolerance {rep.tolerance:.1e}); {len(rep.flagged)} flagged samples",
        )
    )

    states = []
    for _ in range(samples):
        xy = rng.standard_normal(2 * geo.n)
        xy *= growth_radius * rng.uniform() ** (1.0 / (2 * geo.n)) / np.linalg.norm(xy)
        states.append(State(xy[: geo.n], xy[geo.n :]))
    for x in manifold[: samples // 2]:
        y = tangent_projection(geo, x, rng.standard_normal(geo.n))
        states.append(State(x, y))
    try:
        viol = check_growth(problem, states)
        if viol:
            v0 = viol[0]
            detail = f"{len(viol)} violations; first: {v0.condition} lhs={v0.lhs:.3e} > rhs={v0.rhs:.3e}"
        else:
            detail = f"{len(states)} states"
        results.append(CheckResult("growth", "fail" if viol else "pass", detail))
    except HolosdeError as exc:
        results.append(CheckResult("growth", "fail", str(exc)))

    rg, rdg = problem.initial.residuals(geo)
    ok = rg <= INITIAL_TOL and rdg <= INITIAL_TOL
    results.append(
        CheckResult("initial_condition", "pass" if ok else "fail", f"|g(r0)|={rg:.2e}, |Dg(r0)v0|={rdg:.2e}")
    )

    if not manifold:
        return results
    try:
        est = estimate_cg(geo, manifold[: min(16, samples)], near[:4], margin=cg_margin)
        status = "pass" if geo.c_g >= est else "warn"
        results.append(CheckResult("c_g", status, f"configured {geo.c_g:.4g}, sampled estimate {est:.4g}"))
    except HolosdeError as exc:
        results.append(CheckResult("c_g", "fail", str(exc)))
    return results


def format_checks(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    return "\n".join(f"{r.name:<{width}}  {r.status.upper():<4}  {r.detail}" for r in results)


def cmd_validate(cfg: RunConfig) -> int:
    problem = build_problem(cfg, check_initial=False)
    opts = cfg.validate_opts
    results = validate_problem(
        problem,
        samples=opts.samples,
        seed=cfg.seed,
        fd_step=opts.fd_step,
        growth_radius=opts.growth_radius,
        cg_margin=opts.cg_margin,
    )
    table = format_checks(results)
    print(table)
    os.makedirs(cfg.output, exist_ok=True)
    with open(os.path.join(cfg.output, "validation.txt"), "w") as fh:
        fh.write(table + "\n")
    if any(r.status == "fail" for r in results):
        return EXIT_VALIDATION
    if any(r.status == "warn" for r in results):
        log.warning("configured c_g is below the sampled estimate")
        return opts.cg_below_estimate_exit
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "compare": cmd_compare,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="holosde", description="Constrained SDE integrator experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--threads", type=int, help="worker threads for Monte Carlo studies")
        sp.add_argument("--interp", choices=("constant", "linear"), help="interpolation of coarse paths")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    overrides = {"seed": args.seed, "output": args.out, "threads": args.threads, "interp": args.interp}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except StepError as exc:
        log.error("solver failure at %s", exc)
        return EXIT_SOLVER
    except StudyAborted as exc:
        log.error("study aborted: %s", exc)
        return EXIT_SOLVER
    except HolosdeError as exc:
        log.error("solver failure: %s: %s", type(exc).__name__, exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
