"""Inherent SDE on the tangent bundle and the unconstrained comparison schemes.

Eliminating the multiplier gives an ordinary SDE for ``x = (r, v)``::

    dr = v dt
    dv = M^-1 [P_M a - grad g G_M^-1 D^2g(v, v)] dt + M^-1 P_M B dw

It is only meaningful near the tangent bundle; the explicit integrators here
do not enforce the constraints and are used as baselines.
"""

from __future__ import annotations

import numpy as np

from holosde.errors import NonFiniteState, SingularGram
from holosde.geometry import DEFAULT_COND_LIMIT, check_conditioning, gram_matrix
from holosde.model import SdaeProblem, State
from holosde.stepper import NONFINITE, OK, SINGULAR
from holosde.trajectory import Trajectory


def _matvec(a, x):
    return (a @ x[..., None])[..., 0]


def _gram_solve(geo, r, rhs, cond_limit):
    gram = gram_matrix(geo, r)
    if not np.all(check_conditioning(gram, cond_limit)):
        raise SingularGram(f"Gram matrix is singular or condition number exceeds {cond_limit:g}")
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def _second_block(problem, r, v, a, cond_limit):
    geo = problem.geometry
    jac = geo.dg(r)
    rhs = _matvec(jac, geo.mass_inv_apply(a)) + geo.d2g(r, v, v)
    coef = _gram_solve(geo, r, rhs, cond_limit)
    # P_M a - grad g G^-1 D2g(v,v) = a - grad g G^-1 [Dg M^-1 a + D2g(v,v)]
    return geo.mass_inv_apply(a - _matvec(np.swapaxes(jac, -1, -2), coef))


def _unpack(state):
    if isinstance(state, State):
        return state.r, state.v
    x = np.asarray(state, dtype=float)
    n = x.shape[-1] // 2
    return x[..., :n], x[..., n:]


def inherent_drift(problem: SdaeProblem, state, cond_limit: float = DEFAULT_COND_LIMIT) -> np.ndarray:
    """Stacked drift ``(v, M^-1[P_M a - grad g G_M^-1 D^2g(v, v)])``.

    ``state`` is a ``State`` or an array ``(..., 2n)``.
    """
    r, v = _unpack(state)
    a = problem.drift_a(r, v)
    return np.concatenate([v, _second_block(problem, r, v, a, cond_limit)], axis=-1)


def inherent_diffusion(problem: SdaeProblem, state, cond_limit: float = DEFAULT_COND_LIMIT) -> np.ndarray:
    """``(2n, ell)`` matrix with zero top block and bottom block ``M^-1 P_M B``."""
    r, v = _unpack(state)
    geo = problem.geometry
    b = np.asarray(problem.diffusion_b(r, v), dtype=float)
    jac = geo.dg(r)
    minv_b = geo.mass_inv_apply(np.swapaxes(b, -1, -2))  # (..., ell, n)
    coef = _gram_solve(geo, r[..., None, :], _matvec(jac[..., None, :, :], minv_b), cond_limit)
    proj = np.swapaxes(b, -1, -2) - _matvec(np.swapaxes(jac, -1, -2)[..., None, :, :], coef)
    bottom = np.swapaxes(geo.mass_inv_apply(proj), -1, -2)
    return np.concatenate([np.zeros_like(bottom), bottom], axis=-2)


def baseline_eta(v: np.ndarray, second: np.ndarray, h: float) -> np.ndarray:
    """``min(1, 1 / (sqrt(|v|^2 + |c|^2) h))`` with ``c`` the second drift block."""
    s = np.sqrt(np.sum(v * v, axis=-1) + np.sum(second * second, axis=-1)) * h
    with np.errstate(divide="ignore"):
        return np.where(s > 1.0, 1.0 / np.where(s > 0, s, 1.0), 1.0)


def integrate_em_batch(
    problem: SdaeProblem,
    n_steps: int,
    increments: np.ndarray,
    T: float,
    truncated: bool,
    cond_limit: float = DEFAULT_COND_LIMIT,
    initial: State | None = None,
) -> Trajectory:
    """Explicit Euler on the inherent SDE for a batch of increment arrays ``(S, N, ell)``.

    With ``truncated`` the drift increment is scaled by :func:`baseline_eta`.
    Samples whose Gram matrix degenerates or whose state blows up are
    marked in ``status`` and stopped; the rest continue.
    """
    geo = problem.geometry
    increments = np.asarray(increments, dtype=float)
    S = increments.shape[0]
    if increments.shape[1] != n_steps:
        raise ValueError(f"expected {n_steps} increments per sample, got {increments.shape[1]}")
    h = T / n_steps
    init = initial or problem.initial
    n, m = geo.n, geo.m
    r = np.full((S, n_steps + 1, n), np.nan)
    v = np.full((S, n_steps + 1, n), np.nan)
    eta = np.full((S, n_steps), np.nan)
    gres = np.full((S, n_steps + 1), np.nan)
    r[:, 0], v[:, 0] = init.r, init.v
    gres[:, 0] = np.linalg.norm(geo.g(init.r))
    status = np.zeros(S, dtype=int)
    failed = np.full(S, -1)
    act = np.arange(S)
    for k in range(n_steps):
        rk, vk = r[act, k], v[act, k]
        gram = gram_matrix(geo, rk)
        ok = check_conditioning(gram, cond_limit)
        if not np.all(ok):
            status[act[~ok]] = SINGULAR
            failed[act[~ok]] = k
            act, rk, vk = act[ok], rk[ok], vk[ok]
            if act.size == 0:
                break
        a = problem.drift_a(rk, vk)
        c = _second_block(problem, rk, vk, a, cond_limit)
        e = baseline_eta(vk, c, h) if truncated else np.ones(act.size)
        diff = inherent_diffusion(problem, np.concatenate([rk, vk], axis=-1), cond_limit)
        noise = _matvec(diff, increments[act, k])
        rn = rk + (e * h)[:, None] * vk + noise[:, :n]
        vn = vk + (e * h)[:, None] * c + noise[:, n:]
        fin = np.all(np.isfinite(rn), axis=-1) & np.all(np.isfinite(vn), axis=-1)
        if not np.all(fin):
            status[act[~fin]] = NONFINITE
            failed[act[~fin]] = k
        r[act[fin], k + 1] = rn[fin]
        v[act[fin], k + 1] = vn[fin]
        eta[act, k] = e
        act = act[fin]
        gres[act, k + 1] = np.linalg.norm(geo.g(r[act, k + 1]), axis=-1)
    mu = np.zeros((S, n_steps + 1, m))
    return Trajectory(
        grid=np.linspace(0.0, T, n_steps + 1),
        r=r,
        v=v,
        mu=mu,
        eta=eta,
        constraint_residual=gres,
        status=status,
        failed_step=failed,
    )


def integrate_em(problem: SdaeProblem, N: int, path, truncated: bool = False, cond_limit: float = DEFAULT_COND_LIMIT) -> Trajectory:
    """Single-path explicit Euler on the inherent SDE driven by ``path``.

    Classical Euler-Maruyama when ``truncated`` is false, otherwise the
    drift-truncated variant. The constraint is not enforced, so ``g(r_k)``
    drifts away from zero. ``mu`` is filled by :func:`mu_quadrature`.
    ``constraint_residual`` holds ``|g(r_k)|`` at all ``N+1`` grid points.
    """
    from holosde.errors import StepError

    dw = path.increments_at(N)
    batch = integrate_em_batch(problem, N, dw[None], path.horizon, truncated, cond_limit)
    if batch.status[0] != OK:
        cause = SingularGram("Gram matrix is singular") if batch.status[0] == SINGULAR else NonFiniteState("state became non-finite")
        raise StepError(int(batch.failed_step[0]), cause)
    traj = batch.sample(0)
    traj.mu = mu_quadrature(problem, traj, path)
    return traj


def mu_quadrature(problem: SdaeProblem, trajectory: Trajectory, path, cond_limit: float = DEFAULT_COND_LIMIT) -> np.ndarray:
    """Left-endpoint quadrature of the continuous multiplier along a trajectory.

    ``mu_{k+1} - mu_k = -G_M^-1(r_k) {Dg(r_k) M^-1 [a_k h + B_k dw_k] + D^2g(r_k)(v_k, v_k) h}``.
    ``path`` is a ``BrownianPath`` or an increment array matching the grid;
    batched trajectories take increments of shape ``(S, N, ell)``.
    """
    N = trajectory.n_steps
    dw = path.increments_at(N) if hasattr(path, "increments_at") else np.asarray(path, dtype=float)
    return mu_quadrature_arrays(problem, trajectory.r, trajectory.v, dw, trajectory.horizon / N, cond_limit)


def mu_quadrature_arrays(problem, r, v, dw, h, cond_limit=DEFAULT_COND_LIMIT):
    geo = problem.geometry
    rk, vk = r[..., :-1, :], v[..., :-1, :]
    if dw.shape[-2] != rk.shape[-2]:
        raise ValueError("increments do not match the trajectory grid")
    a = problem.drift_a(rk, vk)
    bdw = _matvec(np.asarray(problem.diffusion_b(rk, vk)), dw)
    rhs = _matvec(geo.dg(rk), geo.mass_inv_apply(a * h + bdw)) + geo.d2g(rk, vk, vk) * h
    gram = gram_matrix(geo, rk)
    finite = np.all(np.isfinite(rhs), axis=-1)
    ok = check_conditioning(np.where(finite[..., None, None], gram, 1.0), cond_limit)
    if not np.all(ok | ~finite):
        raise SingularGram("Gram matrix is singular along the trajectory")
    inc = np.full(rhs.shape, np.nan)
    good = finite & ok
    inc[good] = -np.linalg.solve(gram[good], rhs[good][..., None])[..., 0]
    mu = np.zeros(r.shape[:-1] + (geo.m,))
    mu[..., 1:, :] = np.cumsum(inc, axis=-2)
    return mu


# ---------------------------------------------------------------------------
# starred inner product and growth diagnostic


def starred_inner(problem: SdaeProblem, x, y) -> np.ndarray:
    """``<x1, y1> + <M^{1/2} x2, M^{1/2} y2>`` for stacked vectors ``(..., 2n)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = problem.n
    mass = problem.geometry.mass
    return np.sum(x[..., :n] * y[..., :n], axis=-1) + np.sum(x[..., n:] * (y[..., n:] @ mass), axis=-1)


def starred_growth_constant(problem: SdaeProblem) -> float:
    """Constant ``C`` with ``<x, f(x)>_* <= C (1 + |x|_*^2)`` on the tangent bundle.

    On the tangent bundle the curvature and projection terms are orthogonal
    to ``v`` in the mass inner product, so ``<x, f(x)>_* = r.v + v.a`` and
    the growth constant of ``a`` carries over, scaled by the smallest mass
    eigenvalue.
    """
    meta = problem.growth_meta
    if meta is None:
        from holosde.errors import MissingGrowthMeta

        raise MissingGrowthMeta(f"problem {problem.name!r} has no growth constants")
    lam_min = float(np.linalg.eigvalsh(problem.geometry.mass)[0])
    return meta.c_a * max(1.0, 1.0 / lam_min)


def starred_growth_ratio(problem: SdaeProblem, states) -> np.ndarray:
    """``<x, f(x)>_* / (1 + |x|_*^2)`` at each state (``(..., 2n)`` or list of ``State``)."""
    if not isinstance(states, np.ndarray):
        states = np.array([np.concatenate([s.r, s.v]) for s in states])
    f = inherent_drift(problem, states)
    return starred_inner(problem, states, f) / (1.0 + starred_inner(problem, states, states))
