"""Integration loops, pathwise sup-errors and coupled Monte Carlo studies."""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from holosde.errors import GridMismatch, InvalidResolution, StepError, StudyAborted
from holosde.model import SdaeProblem, State
from holosde.reference import integrate_em_batch, mu_quadrature_arrays
from holosde.stepper import OK, KappaBoundWarning, StepperConfig, status_error, step_batch
from holosde.stochastics import coarsen, sample_increments
from holosde.trajectory import Trajectory

COMPONENTS = ("r", "v", "mu", "rv", "combined")
DEFAULT_CHUNK = 50


def integrate_batch(
    problem: SdaeProblem,
    config: StepperConfig,
    n_steps: int,
    increments: np.ndarray,
    T: float,
    initial: Optional[State] = None,
) -> Trajectory:
    """Run the constrained scheme on a batch of increment arrays ``(S, N, ell)``.

    A sample whose step fails is stopped and left NaN from then on; its
    status code and step index are stored on the trajectory.
    """
    geo = problem.geometry
    increments = np.asarray(increments, dtype=float)
    S = increments.shape[0]
    if increments.shape[1:] != (n_steps, problem.ell):
        raise ValueError(f"increments must have shape (S, {n_steps}, {problem.ell}), got {increments.shape}")
    h = T / n_steps
    init = initial or problem.initial
    n, m = geo.n, geo.m
    r = np.full((S, n_steps + 1, n), np.nan)
    v = np.full((S, n_steps + 1, n), np.nan)
    mu = np.full((S, n_steps + 1, m), np.nan)
    eta = np.full((S, n_steps), np.nan)
    kappa = np.full((S, n_steps, m), np.nan)
    lam = np.full((S, n_steps, m), np.nan)
    iters = np.zeros((S, n_steps), dtype=int)
    segs = np.zeros((S, n_steps), dtype=int)
    cres = np.full((S, n_steps), np.nan)
    tres = np.full((S, n_steps), np.nan)
    r[:, 0], v[:, 0], mu[:, 0] = init.r, init.v, 0.0
    status = np.zeros(S, dtype=int)
    failed = np.full(S, -1)
    violations = 0
    act = np.arange(S)
    rk, vk, muk = r[:, 0].copy(), v[:, 0].copy(), mu[:, 0].copy()
    for k in range(n_steps):
        out = step_batch(problem, config, rk, vk, h, increments[act, k])
        st = out["status"]
        violations += int(np.count_nonzero(out["violated"]))
        eta[act, k] = out["eta"]
        kappa[act, k] = out["kappa"]
        lam[act, k] = out["lam"]
        iters[act, k] = out["iters"]
        segs[act, k] = out["segments"]
        ok = st == OK
        if not np.all(ok):
            status[act[~ok]] = st[~ok]
            failed[act[~ok]] = k
            lam[act[~ok], k] = np.nan
            act = act[ok]
            out = {key: val[ok] for key, val in out.items()}
            muk = muk[ok]
            if act.size == 0:
                break
        rk, vk = out["r"], out["v"]
        muk = muk + out["lam"]
        r[act, k + 1], v[act, k + 1], mu[act, k + 1] = rk, vk, muk
        cres[act, k], tres[act, k] = out["constraint_residual"], out["tangency_residual"]
    if violations:
        warnings.warn(f"{violations} steps accepted a multiplier outside the admissible ball", KappaBoundWarning, stacklevel=2)
    return Trajectory(
        grid=np.linspace(0.0, T, n_steps + 1),
        r=r,
        v=v,
        mu=mu,
        eta=eta,
        kappa=kappa,
        lam=lam,
        newton_iters=iters,
        homotopy_segments=segs,
        constraint_residual=cres,
        tangency_residual=tres,
        status=status,
        failed_step=failed,
    )


def integrate(problem: SdaeProblem, config: StepperConfig, N: int, path, initial: Optional[State] = None) -> Trajectory:
    """Apply the scheme ``N`` times along the increments of ``path`` at resolution ``N``.

    Raises StepError carrying the failing step index and the solver error.
    """
    if N < 1:
        raise InvalidResolution("N must be at least 1")
    dw = path.increments_at(N)
    batch = integrate_batch(problem, config, N, dw[None], path.horizon, initial)
    if batch.status[0] != OK:
        k = int(batch.failed_step[0])
        raise StepError(k, status_error(int(batch.status[0]), f"t={k * path.horizon / N:g}"))
    return batch.sample(0)


# ---------------------------------------------------------------------------
# pathwise errors


def interpolate_to(values: np.ndarray, factor: int, mode: str = "constant") -> np.ndarray:
    """Evaluate the interpolant of coarse grid values on a grid ``factor`` times finer.

    ``values`` has the time axis second to last: ``(..., Nc+1, d)``.
    """
    if mode not in ("constant", "linear"):
        raise ValueError(f"interpolation mode must be 'constant' or 'linear', got {mode!r}")
    nc = values.shape[-2] - 1
    j = np.arange(nc * factor + 1)
    k = j // factor
    if mode == "constant":
        return values[..., k, :]
    w = ((j % factor) / factor)[:, None]
    k1 = np.minimum(k + 1, nc)
    return (1.0 - w) * values[..., k, :] + w * values[..., k1, :]


def _refine_factor(coarse: Trajectory, fine: Trajectory) -> int:
    nc, nf = coarse.n_steps, fine.n_steps
    if nf % nc or not np.isclose(coarse.horizon, fine.horizon, rtol=0, atol=1e-14 * max(1.0, fine.horizon)):
        raise GridMismatch(f"grid with {nc} steps on [0, {coarse.horizon}] does not refine into {nf} steps on [0, {fine.horizon}]")
    return nf // nc


def sup_differences(coarse: Trajectory, fine: Trajectory, mode: str = "constant") -> dict[str, np.ndarray]:
    """Sup over fine grid times of the interpolation error, for every component.

    Returns arrays over the sample axis (scalars for single paths) keyed by
    ``r``, ``v``, ``mu``, ``rv`` (joint position-velocity) and ``combined``.
    """
    q = _refine_factor(coarse, fine)
    sq = {}
    for name in ("r", "v", "mu"):
        d = interpolate_to(getattr(coarse, name), q, mode) - getattr(fine, name)
        sq[name] = np.sum(d * d, axis=-1)
    sq["rv"] = sq["r"] + sq["v"]
    sq["combined"] = sq["rv"] + sq["mu"]
    return {name: np.sqrt(np.max(val, axis=-1)) for name, val in sq.items()}


def pathwise_error(traj_coarse: Trajectory, traj_fine: Trajectory, p: float = 2.0, mode: str = "constant"):
    """``(err_r, err_v, err_mu)``: sup over fine grid times of the interpolated coarse path minus the fine path.

    ``p`` is accepted for interface symmetry; powers are applied by the
    Monte Carlo aggregation.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    d = sup_differences(traj_coarse, traj_fine, mode)
    return d["r"], d["v"], d["mu"]


def lp_norm(values: np.ndarray, p: float) -> float:
    """``(mean values^p)^(1/p)``."""
    return float(np.mean(np.asarray(values, dtype=float) ** p) ** (1.0 / p))


def jackknife_lp(values: np.ndarray, p: float) -> tuple[float, float]:
    """Estimate ``(mean S^p)^(1/p)`` and its jackknife standard error."""
    x = np.asarray(values, dtype=float) ** p
    n = x.size
    est = float(np.mean(x) ** (1.0 / p))
    if n < 2:
        return est, float("inf")
    loo = ((x.sum() - x) / (n - 1)) ** (1.0 / p)
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return est, float(se)


def loglog_slope(resolutions, errors, T: float = 1.0) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``, ``h = T / N``."""
    h = T / np.asarray(resolutions, dtype=float)
    return float(np.polyfit(np.log(h), np.log(np.asarray(errors, dtype=float)), 1)[0])


def _chunks(samples: int, chunk_size: int):
    return [np.arange(s, min(s + chunk_size, samples)) for s in range(0, samples, chunk_size)]


def _run_chunks(fn, chunks, threads: int):
    # chunk boundaries do not depend on the thread count, and results are
    # reassembled by chunk index, so output is identical for any ``threads``
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


def _check_resolutions(resolutions, n_ref):
    res = [int(n) for n in resolutions]
    if not res or any(n < 1 for n in res):
        raise InvalidResolution("resolutions must be positive integers")
    if any(b <= a for a, b in zip(res, res[1:])):
        raise InvalidResolution("resolutions must be strictly increasing")
    bad = [n for n in res if n_ref % n]
    if bad:
        raise InvalidResolution(f"resolutions {bad} do not divide N_ref={n_ref}")
    return res


# ---------------------------------------------------------------------------
# convergence study


@dataclass(eq=False)
class ConvergenceReport:
    resolutions: list[int]
    n_ref: int
    p: float
    interp: str
    seed: int
    samples: int
    horizon: float
    errors: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    used: np.ndarray
    failures: np.ndarray
    per_sample: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def slope(self, component: str) -> float:
        return loglog_slope(self.resolutions, self.errors[component], self.horizon)

    def rows(self) -> list[dict]:
        out = []
        for i, n in enumerate(self.resolutions):
            for comp in COMPONENTS:
                out.append(
                    {
                        "N": n,
                        "h": self.horizon / n,
                        "component": comp,
                        "p": self.p,
                        "error": float(self.errors[comp][i]),
                        "stderr": float(self.stderr[comp][i]),
                        "samples": int(self.used[i]),
                        "failures": int(self.failures[i]),
                    }
                )
        return out

    def summary(self) -> dict:
        return {
            "resolutions": self.resolutions,
            "n_ref": self.n_ref,
            "p": self.p,
            "interp": self.interp,
            "seed": self.seed,
            "samples": self.samples,
            "T": self.horizon,
            "failures": [int(f) for f in self.failures],
            "slopes": {c: self.slope(c) for c in COMPONENTS if np.all(self.errors[c] > 0)},
        }


def convergence_study(
    problem: SdaeProblem,
    config: StepperConfig,
    resolutions,
    N_ref: int,
    samples: int,
    p: float = 2.0,
    seed: int = 0,
    *,
    T: float = 1.0,
    interp: str = "constant",
    threads: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
    max_failure_rate: float = 0.1,
) -> ConvergenceReport:
    """Self-convergence against the ``N_ref`` run of the same scheme on coupled paths.

    Sample ``i`` uses Brownian stream ``i`` of ``seed``; every resolution is
    driven by exact block sums of that stream's finest increments.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")
    if p < 1:
        raise ValueError("p must be >= 1")
    res = _check_resolutions(resolutions, N_ref)

    def work(idx):
        fine_dw = sample_increments(problem.ell, T, N_ref, seed, idx)
        ref = integrate_batch(problem, config, N_ref, fine_dw, T)
        ref_ok = ref.status == OK
        sups = {c: np.full((len(res), idx.size), np.nan) for c in COMPONENTS}
        fails = np.zeros((len(res), idx.size), dtype=bool)
        for i, n in enumerate(res):
            dw = coarsen(fine_dw, N_ref // n, axis=1)
            tr = integrate_batch(problem, config, n, dw, T)
            ok = ref_ok & (tr.status == OK)
            fails[i] = ~ok
            d = sup_differences(tr, ref, interp)
            for c in COMPONENTS:
                sups[c][i] = np.where(ok, d[c], np.nan)
        return sups, fails

    parts = _run_chunks(work, _chunks(samples, chunk_size), threads)
    per_sample = {c: np.concatenate([pt[0][c] for pt in parts], axis=1) for c in COMPONENTS}
    fails = np.concatenate([pt[1] for pt in parts], axis=1)
    failures = fails.sum(axis=1)
    worst = int(np.argmax(failures))
    if failures[worst] > max_failure_rate * samples:
        raise StudyAborted(f"{failures[worst]} of {samples} samples failed at N={res[worst]}")
    errors = {c: np.zeros(len(res)) for c in COMPONENTS}
    stderr = {c: np.zeros(len(res)) for c in COMPONENTS}
    for c in COMPONENTS:
        for i in range(len(res)):
            vals = per_sample[c][i][~fails[i]]
            errors[c][i], stderr[c][i] = jackknife_lp(vals, p)
    return ConvergenceReport(
        resolutions=res,
        n_ref=int(N_ref),
        p=float(p),
        interp=interp,
        seed=int(seed),
        samples=int(samples),
        horizon=float(T),
        errors=errors,
        stderr=stderr,
        used=samples - failures,
        failures=failures,
        per_sample=per_sample,
    )


# ---------------------------------------------------------------------------
# scheme comparison

COMPARISON_STATS = ("sup_diff_rv", "sup_diff_mu", "mu_quad_constrained", "baseline_g", "constrained_g")


@dataclass(eq=False)
class ComparisonReport:
    """Constrained scheme versus drift-truncated explicit Euler on the inherent SDE.

    Per resolution and sample:

    - ``sup_diff_rv``: sup over the grid of the joint (r, v) distance.
    - ``sup_diff_mu``: sup distance between the constrained multiplier sum
      and the multiplier quadrature along the baseline path.
    - ``mu_quad_constrained``: sup distance between the multiplier sum and
      the quadrature along the constrained path itself.
    - ``baseline_g`` / ``constrained_g``: ``max_k |g(r_k)|``.

    ``stats[name]`` and ``stderr[name]`` are Lp aggregates over samples
    where both schemes succeeded; ``maxima`` holds sample maxima.
    """

    resolutions: list[int]
    p: float
    seed: int
    samples: int
    horizon: float
    per_sample: dict[str, np.ndarray]
    baseline_failures: np.ndarray
    constrained_failures: np.ndarray
    stats: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    maxima: dict[str, np.ndarray]

    def rows(self) -> list[dict]:
        out = []
        for i, n in enumerate(self.resolutions):
            for name in COMPARISON_STATS:
                out.append(
                    {
                        "N": n,
                        "h": self.horizon / n,
                        "statistic": name,
                        "p": self.p,
                        "value": float(self.stats[name][i]),
                        "stderr": float(self.stderr[name][i]),
                        "max": float(self.maxima[name][i]),
                        "baseline_failures": int(self.baseline_failures[i]),
                        "constrained_failures": int(self.constrained_failures[i]),
                    }
                )
        return out


def scheme_comparison(
    problem: SdaeProblem,
    config: StepperConfig,
    resolutions,
    samples: int,
    seed: int = 0,
    *,
    T: float = 1.0,
    p: float = 2.0,
    threads: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> ComparisonReport:
    """Run both schemes on shared Brownian paths at each resolution.

    Baseline failures (degenerate Gram matrix after leaving the neighbourhood
    of the manifold, or blow-up) are counted and excluded, not raised.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    res = [int(n) for n in resolutions]
    n_max = int(np.lcm.reduce(res))
    _check_resolutions(sorted(set(res)), n_max)

    def work(idx):
        fine_dw = sample_increments(problem.ell, T, n_max, seed, idx)
        vals = {s: np.full((len(res), idx.size), np.nan) for s in COMPARISON_STATS}
        bfail = np.zeros((len(res), idx.size), dtype=bool)
        cfail = np.zeros((len(res), idx.size), dtype=bool)
        for i, n in enumerate(res):
            dw = coarsen(fine_dw, n_max // n, axis=1)
            con = integrate_batch(problem, config, n, dw, T)
            base = integrate_em_batch(problem, n, dw, T, truncated=True, cond_limit=config.gram_cond_limit)
            cok, bok = con.status == OK, base.status == OK
            cfail[i], bfail[i] = ~cok, ~bok
            both = cok & bok
            h = T / n
            drv = np.sqrt(np.max(np.sum((con.r - base.r) ** 2 + (con.v - base.v) ** 2, axis=-1), axis=-1))
            vals["sup_diff_rv"][i] = np.where(both, drv, np.nan)
            if np.any(both):
                mq_b = mu_quadrature_arrays(problem, base.r[both], base.v[both], dw[both], h, config.gram_cond_limit)
                vals["sup_diff_mu"][i, both] = np.max(np.linalg.norm(con.mu[both] - mq_b, axis=-1), axis=-1)
            if np.any(cok):
                mq_c = mu_quadrature_arrays(problem, con.r[cok], con.v[cok], dw[cok], h, config.gram_cond_limit)
                vals["mu_quad_constrained"][i, cok] = np.max(np.linalg.norm(con.mu[cok] - mq_c, axis=-1), axis=-1)
                vals["constrained_g"][i, cok] = np.max(con.constraint_residual[cok], axis=-1)
            vals["baseline_g"][i, bok] = np.max(base.constraint_residual[bok], axis=-1)
        return vals, bfail, cfail

    parts = _run_chunks(work, _chunks(samples, chunk_size), threads)
    per_sample = {s: np.concatenate([pt[0][s] for pt in parts], axis=1) for s in COMPARISON_STATS}
    bfail = np.concatenate([pt[1] for pt in parts], axis=1)
    cfail = np.concatenate([pt[2] for pt in parts], axis=1)
    stats = {s: np.full(len(res), np.nan) for s in COMPARISON_STATS}
    stderr = {s: np.full(len(res), np.nan) for s in COMPARISON_STATS}
    maxima = {s: np.full(len(res), np.nan) for s in COMPARISON_STATS}
    for s in COMPARISON_STATS:
        for i in range(len(res)):
            x = per_sample[s][i]
            x = x[np.isfinite(x)]
            if x.size:
                stats[s][i], stderr[s][i] = jackknife_lp(x, p)
                maxima[s][i] = float(np.max(x))
    return ComparisonReport(
        resolutions=res,
        p=float(p),
        seed=int(seed),
        samples=int(samples),
        horizon=float(T),
        per_sample=per_sample,
        baseline_failures=bfail.sum(axis=1),
        constrained_failures=cfail.sum(axis=1),
        stats=stats,
        stderr=stderr,
        maxima=maxima,
    )


# ---------------------------------------------------------------------------
# output


def write_csv(path, rows: list[dict]) -> None:
    """Write dict rows; floats use ``repr`` so they parse back exactly."""
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([_fmt(x) for x in row.values()])


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def trajectory_rows(traj: Trajectory) -> list[dict]:
    """Per-grid-point rows: state, multiplier sum and the record of the step ending there."""
    n = traj.r.shape[-1]
    m = traj.mu.shape[-1]
    rows = []
    for k in range(traj.n_steps + 1):
        row = {"t": float(traj.grid[k])}
        row.update({f"r{i}": float(traj.r[k, i]) for i in range(n)})
        row.update({f"v{i}": float(traj.v[k, i]) for i in range(n)})
        row.update({f"mu{i}": float(traj.mu[k, i]) for i in range(m)})
        if k == 0 or traj.kappa is None:
            rec = dict.fromkeys(("eta", "kappa_norm", "lambda_norm", "constraint_residual", "tangency_residual"))
        else:
            j = k - 1
            rec = {
                "eta": float(traj.eta[j]),
                "kappa_norm": float(np.linalg.norm(traj.kappa[j])),
                "lambda_norm": float(np.linalg.norm(traj.lam[j])),
                "constraint_residual": float(traj.constraint_residual[j]),
                "tangency_residual": float(traj.tangency_residual[j]),
            }
        row.update(rec)
        rows.append(row)
    return rows
