"""One step of the half-explicit drift-truncated Euler scheme.

Given ``(r, v)`` on the tangent bundle, a step computes the truncation factor
``eta``, the position multiplier ``kappa`` from the nonlinear constraint
``g(r + eta*v*h + M^-1 grad g(r) kappa) = 0`` and the velocity multiplier
``lambda`` from the linear hidden constraint ``Dg(r_next) v_next = 0``.

The private ``*_batch`` functions work on arrays with a leading sample axis
and report failures per sample through status codes; the public functions
operate on a single state and raise typed errors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from holosde.errors import KappaBoundViolation, NewtonDivergence, NonFiniteState, SingularGram
from holosde.geometry import check_conditioning, gram_matrix, solve_checked
from holosde.model import SdaeProblem, State

OK, DIVERGED, BOUND, SINGULAR, NONFINITE = 0, 1, 2, 3, 4
_STATUS_ERRORS = {
    DIVERGED: NewtonDivergence,
    BOUND: KappaBoundViolation,
    SINGULAR: SingularGram,
    NONFINITE: NonFiniteState,
}
_STATUS_TEXT = {
    DIVERGED: "Newton iteration and homotopy continuation failed",
    BOUND: "position multiplier outside the admissible ball",
    SINGULAR: "constraint iteration matrix is singular",
    NONFINITE: "state became non-finite",
}


def status_error(code: int, context: str = "") -> Exception:
    """Exception instance corresponding to a nonzero batch status code."""
    msg = _STATUS_TEXT[code] + (f" ({context})" if context else "")
    return _STATUS_ERRORS[code](msg)


class KappaBoundWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class StepperConfig:
    newton_tol: float = 1e-12
    newton_max_iter: int = 25
    homotopy_max_depth: int = 10
    kappa_bound_mode: str = "enforce"
    gram_cond_limit: float = 1e12
    tangency_tol: float = 1e-10

    def __post_init__(self):
        if self.kappa_bound_mode not in ("enforce", "warn"):
            raise ValueError(f"kappa_bound_mode must be 'enforce' or 'warn', got {self.kappa_bound_mode!r}")
        if not (self.newton_tol > 0 and self.gram_cond_limit > 0 and self.tangency_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.newton_max_iter < 1 or self.homotopy_max_depth < 0:
            raise ValueError("newton_max_iter must be >= 1 and homotopy_max_depth >= 0")


@dataclass(frozen=True, eq=False)
class StepRecord:
    eta: float
    kappa: np.ndarray
    lam: np.ndarray
    newton_iters: int
    homotopy_segments: int
    constraint_residual: float
    tangency_residual: float


@dataclass(eq=False)
class PositionDiagnostics:
    newton_iters: int
    homotopy_segments: int
    used_homotopy: bool
    bound_violated: bool
    residual: float
    # kappa at tau = 0 reached by continuing a rejected root backwards; a
    # nonzero value shows the root is not on the branch through the origin
    branch_origin: Optional[np.ndarray] = None


def _norm(x):
    return np.sqrt(np.sum(np.square(x), axis=-1))


def _matvec(a, x):
    return (a @ x[..., None])[..., 0]


def _raise_status(code: int, context: str):
    raise status_error(code, context)


# ---------------------------------------------------------------------------
# truncation


def _eta_from(v, a, h, c_eta):
    nv = _norm(v)
    mx = np.maximum(np.maximum(nv, nv * nv), _norm(a))
    denom = mx * h
    with np.errstate(divide="ignore"):
        return np.where(denom > c_eta, c_eta / np.where(denom > 0, denom, 1.0), 1.0)


def truncation_eta(problem: SdaeProblem, r, v, h: float):
    """``min(1, c_eta / (max(|v|, |v|^2, |a(r, v)|) h))``, equal to 1 when the max is 0."""
    if h <= 0:
        raise ValueError("step size must be positive")
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    eta = _eta_from(v, problem.drift_a(r, v), h, problem.geometry.constants.c_eta)
    return float(eta) if np.ndim(eta) == 0 else eta


# ---------------------------------------------------------------------------
# position multiplier


def _newton(geo, base, jg, kappa, shift, config, ball):
    """Batched Newton for ``g(base + jg kappa) + shift = 0``.

    Returns ``(kappa, residual_norm, iterations, status)``.
    """
    kappa = np.array(kappa, dtype=float)
    nb = base.shape[0]
    jprev = np.zeros((nb, geo.m, geo.m))
    iters = np.zeros(nb, dtype=int)
    status = np.full(nb, -1)
    resn = np.full(nb, np.inf)
    idx = np.arange(nb)
    for it in range(config.newton_max_iter + 1):
        y = base[idx] + _matvec(jg[idx], kappa[idx])
        res = geo.g(y) + shift[idx]
        rn = _norm(res)
        resn[idx] = rn
        done = rn <= config.newton_tol
        bad = ~np.isfinite(rn)
        if ball is not None:
            bad |= _norm(kappa[idx]) >= ball
        status[idx[done]] = OK
        # final correction with the previous Jacobian: the residual test alone
        # leaves a multiplier error of the order of newton_tol
        pol = done & (iters[idx] > 0)
        if np.any(pol):
            ip = idx[pol]
            kappa[ip] -= np.linalg.solve(jprev[ip], res[pol][..., None])[..., 0]
        status[idx[bad & ~done]] = DIVERGED
        keep = ~(done | bad)
        if not np.any(keep) or it == config.newton_max_iter:
            idx = idx[keep]
            break
        idx, y, res = idx[keep], y[keep], res[keep]
        jmat = geo.dg(y) @ jg[idx]
        okc = check_conditioning(jmat, config.gram_cond_limit)
        status[idx[~okc]] = SINGULAR
        idx, jmat, res = idx[okc], jmat[okc], res[okc]
        if idx.size == 0:
            break
        kappa[idx] -= np.linalg.solve(jmat, res[..., None])[..., 0]
        jprev[idx] = jmat
        iters[idx] += 1
    status[idx] = DIVERGED
    status[status < 0] = DIVERGED
    return kappa, resn, iters, status


def _continuation(geo, base, jg, g0, config, ball, kappa_start, tau_from=0.0, tau_to=1.0):
    """Track a root of ``F(tau, k) = g(base + jg k) + (tau - 1) g0`` in tau.

    Single sample (leading axis of length 1). The tau-interval is walked on a
    dyadic grid; a failed sub-step halves the step, up to
    ``config.homotopy_max_depth`` halvings. Returns
    ``(kappa, residual, iterations, segments, status)``.
    """
    units = 1 << config.homotopy_max_depth
    pos, depth, segments, iters = 0, 0, 0, 0
    kappa = np.array(kappa_start, dtype=float).reshape(1, -1)
    resn = np.inf
    last_fail = DIVERGED
    while pos < units:
        step = min(units >> depth, units - pos)
        tau = tau_from + (tau_to - tau_from) * (pos + step) / units
        shift = (tau - 1.0) * g0
        k, rn, it, st = _newton(geo, base, jg, kappa, shift, config, ball)
        iters += int(it[0])
        if st[0] == OK:
            kappa, resn = k, float(rn[0])
            pos += step
            segments += 1
        else:
            last_fail = int(st[0])
            depth += 1
            if depth > config.homotopy_max_depth:
                return kappa, resn, iters, segments, last_fail
    return kappa, resn, iters, segments, OK


def _solve_position_batch(problem, config, r, v, h, eta, kappa_init=None, jg=None):
    geo = problem.geometry
    ck = geo.constants.c_kappa
    enforce = config.kappa_bound_mode == "enforce"
    ball = 2.0 * ck if enforce else None
    nb = r.shape[0]
    if jg is None:
        jg = geo.mass_inv_grad(r)
    gram = geo.dg(r) @ jg
    gram_ok = check_conditioning(gram, config.gram_cond_limit)

    base = r + (eta * h)[:, None] * v
    k0 = np.zeros((nb, geo.m)) if kappa_init is None else np.broadcast_to(kappa_init, (nb, geo.m))
    kappa, resn, iters, status = _newton(geo, base, jg, k0, np.zeros((nb, geo.m)), config, ball)
    status[~gram_ok] = SINGULAR
    segments = np.where(status == OK, 1, 0)
    used_h = np.zeros(nb, dtype=bool)
    violated = np.zeros(nb, dtype=bool)
    knorm = _norm(kappa)
    if enforce:
        status[(status == OK) & (knorm >= ck)] = BOUND
    else:
        violated = (status == OK) & (knorm >= ck)

    for i in np.flatnonzero((status != OK) & gram_ok):
        b1, j1 = base[i : i + 1], jg[i : i + 1]
        g0 = geo.g(b1)
        k, rn, it, seg, st = _continuation(geo, b1, j1, g0, config, ball, np.zeros(geo.m))
        iters[i] += it
        segments[i] = seg
        used_h[i] = True
        if st == OK:
            kappa[i], resn[i] = k[0], rn
            if _norm(k[0]) >= ck:
                if enforce:
                    st = BOUND
                else:
                    violated[i] = True
        elif status[i] == BOUND:
            # Newton found a root, but only outside the admissible ball
            st = BOUND
        status[i] = st
    r_next = base + _matvec(jg, kappa)
    return {
        "r_next": r_next,
        "kappa": kappa,
        "residual": resn,
        "iters": iters,
        "segments": segments,
        "used_homotopy": used_h,
        "violated": violated,
        "status": status,
        "jg": jg,
        "base": base,
    }


def solve_position(problem: SdaeProblem, config: StepperConfig, r, v, h: float, *, eta=None, kappa_init=None):
    """Solve the position constraint for the multiplier ``kappa``.

    Newton's method is started from ``kappa_init`` (zero by default) with a
    fresh Jacobian every iteration. If it diverges, leaves the ball of
    radius ``2 c_kappa`` or (in enforce mode) lands outside ``|kappa| <
    c_kappa``, the root is instead tracked by homotopy continuation from
    ``kappa = 0``.

    Returns ``(r_next, kappa, PositionDiagnostics)``.
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    if eta is None:
        eta = truncation_eta(problem, r, v, h)
    out = _solve_position_batch(
        problem, config, r[None], v[None], h, np.array([eta], dtype=float), kappa_init=kappa_init
    )
    st = int(out["status"][0])
    if st != OK:
        _raise_status(st, f"h={h:g}, |v|={np.linalg.norm(v):.3e}, eta={eta:.3e}")
    kappa = out["kappa"][0]
    diag = PositionDiagnostics(
        newton_iters=int(out["iters"][0]),
        homotopy_segments=int(out["segments"][0]),
        used_homotopy=bool(out["used_homotopy"][0]),
        bound_violated=bool(out["violated"][0]),
        residual=float(np.linalg.norm(problem.geometry.g(out["r_next"][0]))),
    )
    if diag.bound_violated:
        geo = problem.geometry
        b1 = out["base"][:1]
        origin, _, _, _, st = _continuation(
            geo, b1, out["jg"][:1], geo.g(b1), config, None, kappa, tau_from=1.0, tau_to=0.0
        )
        if st == OK:
            diag.branch_origin = origin[0]
        warnings.warn(
            f"|kappa|={np.linalg.norm(kappa):.4g} >= c_kappa={geo.constants.c_kappa:.4g}; "
            "root is outside the admissible ball",
            KappaBoundWarning,
            stacklevel=2,
        )
    return out["r_next"][0], kappa, diag


def trace_branch(problem: SdaeProblem, config: StepperConfig, r, v, h: float, kappa_start, tau_from, tau_to, eta=None):
    """Continue a root of the homotopy ``F(tau, kappa)`` from ``tau_from`` to ``tau_to``.

    ``F(tau, kappa) = g(r + eta v h + M^-1 grad g(r) kappa) + (tau - 1) g(r + eta v h)``;
    ``F(0, 0) = 0`` and roots at ``tau = 1`` solve the position constraint.
    Returns the multiplier at ``tau_to``.
    """
    geo = problem.geometry
    r = np.asarray(r, dtype=float)[None]
    v = np.asarray(v, dtype=float)[None]
    if eta is None:
        eta = truncation_eta(problem, r[0], v[0], h)
    base = r + eta * h * v
    jg = geo.mass_inv_grad(r)
    k, _, _, _, st = _continuation(geo, base, jg, geo.g(base), config, None, kappa_start, tau_from, tau_to)
    if st != OK:
        _raise_status(st, "branch tracing")
    return k[0]


# ---------------------------------------------------------------------------
# velocity multiplier


def _solve_velocity_batch(problem, config, r_next, v, h, eta, a, bdw, jg):
    geo = problem.geometry
    u = v + geo.mass_inv_apply((eta * h)[:, None] * a + bdw)
    jn = geo.dg(r_next)
    kmat = jn @ jg
    ok = check_conditioning(kmat, config.gram_cond_limit)
    lam = np.zeros(u.shape[:-1] + (geo.m,))
    if np.any(ok):
        lam[ok] = np.linalg.solve(kmat[ok], -_matvec(jn[ok], u[ok])[..., None])[..., 0]
    v_next = u + _matvec(jg, lam)
    tres = _norm(_matvec(jn, v_next))
    # one step of iterative refinement where rounding left a visible residual
    redo = ok & (tres > config.tangency_tol * (1.0 + _norm(v_next)))
    if np.any(redo):
        corr = np.linalg.solve(kmat[redo], -_matvec(jn[redo], v_next[redo])[..., None])[..., 0]
        lam[redo] += corr
        v_next[redo] = u[redo] + _matvec(jg[redo], lam[redo])
        tres[redo] = _norm(_matvec(jn[redo], v_next[redo]))
    return v_next, lam, tres, ok


def solve_velocity(problem: SdaeProblem, config: StepperConfig, r, r_next, v, h: float, dw, *, eta=None):
    """Solve the linear hidden-constraint system for ``lambda``.

    Returns ``(v_next, lambda)`` with ``Dg(r_next) v_next = 0``.
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    a = problem.drift_a(r, v)
    if eta is None:
        eta = _eta_from(v, a, h, problem.geometry.constants.c_eta)
    bdw = _matvec(np.asarray(problem.diffusion_b(r, v)), np.asarray(dw, dtype=float))
    jg = problem.geometry.mass_inv_grad(r)
    v_next, lam, _, ok = _solve_velocity_batch(
        problem, config, np.asarray(r_next, dtype=float)[None], v[None], h,
        np.array([eta], dtype=float), a[None], bdw[None], jg[None],
    )
    if not ok[0]:
        _raise_status(SINGULAR, f"velocity system, h={h:g}")
    return v_next[0], lam[0]


# ---------------------------------------------------------------------------
# full step


def step_batch(problem: SdaeProblem, config: StepperConfig, r, v, h: float, dw):
    """Advance a batch of states ``r, v`` of shape ``(S, n)`` by one step.

    Returns a dict of per-sample arrays including ``status`` (0 = success).
    Failed samples carry NaN in their new state.
    """
    geo = problem.geometry
    a = problem.drift_a(r, v)
    eta = _eta_from(v, a, h, geo.constants.c_eta)
    pos = _solve_position_batch(problem, config, r, v, h, eta)
    bdw = _matvec(problem.diffusion_b(r, v), dw)
    v_next, lam, tres, ok = _solve_velocity_batch(problem, config, pos["r_next"], v, h, eta, a, bdw, pos["jg"])
    status = pos["status"]
    status[(status == OK) & ~ok] = SINGULAR
    r_next = pos["r_next"]
    finite = np.all(np.isfinite(r_next), axis=-1) & np.all(np.isfinite(v_next), axis=-1)
    status[(status == OK) & ~finite] = NONFINITE
    bad = status != OK
    cres = np.where(bad, np.nan, _norm(geo.g(np.where(bad[:, None], 0.0, r_next))))
    if np.any(bad):
        r_next[bad] = np.nan
        v_next[bad] = np.nan
    return {
        "r": r_next,
        "v": v_next,
        "eta": eta,
        "kappa": pos["kappa"],
        "lam": lam,
        "iters": pos["iters"],
        "segments": pos["segments"],
        "constraint_residual": cres,
        "tangency_residual": tres,
        "status": status,
        "violated": pos["violated"],
    }


def step(problem: SdaeProblem, config: StepperConfig, state: State, h: float, dw) -> tuple[State, StepRecord]:
    """One scheme step from ``state`` with Brownian increment ``dw``."""
    if h <= 0:
        raise ValueError("step size must be positive")
    dw = np.asarray(dw, dtype=float).reshape(1, problem.ell)
    if config.kappa_bound_mode == "warn":
        # route through solve_position so that violations warn and carry diagnostics
        r_next, kappa, diag = solve_position(problem, config, state.r, state.v, h)
        eta = truncation_eta(problem, state.r, state.v, h)
        v_next, lam = solve_velocity(problem, config, state.r, r_next, state.v, h, dw[0], eta=eta)
        geo = problem.geometry
        rec = StepRecord(
            eta=eta, kappa=kappa, lam=lam, newton_iters=diag.newton_iters,
            homotopy_segments=diag.homotopy_segments,
            constraint_residual=float(np.linalg.norm(geo.g(r_next))),
            tangency_residual=float(np.linalg.norm(geo.dg(r_next) @ v_next)),
        )
        return State(r_next, v_next), rec
    out = step_batch(problem, config, state.r[None], state.v[None], h, dw)
    st = int(out["status"][0])
    if st != OK:
        _raise_status(st, f"h={h:g}, |v|={np.linalg.norm(state.v):.3e}, eta={out['eta'][0]:.3e}")
    rec = StepRecord(
        eta=float(out["eta"][0]),
        kappa=out["kappa"][0],
        lam=out["lam"][0],
        newton_iters=int(out["iters"][0]),
        homotopy_segments=int(out["segments"][0]),
        constraint_residual=float(out["constraint_residual"][0]),
        tangency_residual=float(out["tangency_residual"][0]),
    )
    return State(out["r"][0], out["v"][0]), rec


def lambda_leading_term(problem: SdaeProblem, r, v, h: float, dw, *, eta=None, cond_limit: float = 1e12):
    """Explicit part of the velocity multiplier decomposition.

    ``-G_M^-1(r) { Dg(r) M^-1 [eta a h + B dw] + eta D^2g(r)(v, v) h }``;
    the difference to the actual multiplier is ``O(h^2)`` for ``dw = 0``
    and ``O(h)`` per unit ``dw``.
    """
    geo = problem.geometry
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    dw = np.asarray(dw, dtype=float)
    a = problem.drift_a(r, v)
    if eta is None:
        eta = _eta_from(v, a, h, geo.constants.c_eta)
    eta = np.asarray(eta, dtype=float)
    force = eta[..., None] * h * a + _matvec(np.asarray(problem.diffusion_b(r, v)), dw)
    rhs = _matvec(geo.dg(r), geo.mass_inv_apply(force)) + eta[..., None] * h * geo.d2g(r, v, v)
    return -solve_checked(gram_matrix(geo, r), rhs, cond_limit, "Gram matrix")
