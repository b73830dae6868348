"""Constraint geometry: g and its derivatives, the mass matrix, Gram matrix
and projector, plus finite-difference validation and a sampled estimate of
the geometry constant ``c_g``.

All user callables must broadcast over leading axes:

* ``g(x)`` maps ``(..., n) -> (..., m)``
* ``dg(x)`` maps ``(..., n) -> (..., m, n)``
* ``d2g(x, y, z)`` maps three ``(..., n)`` arrays to ``(..., m)``, the
  bilinear action ``D^2 g(x)(y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from holosde.errors import SingularGram

DEFAULT_COND_LIMIT = 1e12


@dataclass(frozen=True)
class DerivedConstants:
    c_eta: float
    c_kappa: float

    @classmethod
    def from_cg(cls, c_g: float) -> "DerivedConstants":
        return cls(c_eta=1.0 / (4.0 * c_g**3), c_kappa=1.0 / (8.0 * c_g**4))


@dataclass(frozen=True, eq=False)
class ConstraintGeometry:
    """Holonomic constraint ``g(x) = 0`` in R^n together with the mass matrix.

    Args:
        n: ambient dimension.
        m: number of constraints, ``m < n``.
        g, dg, d2g: constraint function, Jacobian and bilinear second
            derivative (see module docstring for shapes).
        mass: symmetric positive definite ``(n, n)`` mass matrix.
        epsilon: radius of the neighbourhood of the manifold on which the
            Jacobian is assumed to have full rank. Metadata only.
        c_g: geometry constant bounding the operator norms of
            ``M^-1 grad g``, ``G_M``, ``G_M^-1`` and the higher derivatives.
    """

    n: int
    m: int
    g: Callable[[np.ndarray], np.ndarray]
    dg: Callable[[np.ndarray], np.ndarray]
    d2g: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    mass: np.ndarray
    epsilon: float
    c_g: float
    _mass_inv: np.ndarray = field(init=False, repr=False, compare=False)
    _mass_sqrt: np.ndarray = field(init=False, repr=False, compare=False)
    _identity_mass: bool = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.n >= 2 and 1 <= self.m < self.n):
            raise ValueError(f"need n >= 2 and 1 <= m < n, got n={self.n}, m={self.m}")
        mass = np.array(self.mass, dtype=float)
        if mass.shape != (self.n, self.n):
            raise ValueError(f"mass must be {self.n}x{self.n}, got {mass.shape}")
        if not np.allclose(mass, mass.T, rtol=1e-12, atol=1e-14):
            raise ValueError("mass matrix is not symmetric")
        try:
            cf = scipy.linalg.cho_factor(mass, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("mass matrix is not positive definite") from exc
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not self.c_g >= 1.0:
            raise ValueError(f"c_g must be >= 1, got {self.c_g}")
        mass_inv = scipy.linalg.cho_solve(cf, np.eye(self.n))
        mass_inv = 0.5 * (mass_inv + mass_inv.T)
        w, q = np.linalg.eigh(mass)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "_mass_inv", mass_inv)
        object.__setattr__(self, "_mass_sqrt", (q * np.sqrt(w)) @ q.T)
        object.__setattr__(self, "_identity_mass", bool(np.array_equal(mass, np.eye(self.n))))

    @property
    def constants(self) -> DerivedConstants:
        return DerivedConstants.from_cg(self.c_g)

    def mass_inv_apply(self, x: np.ndarray) -> np.ndarray:
        """``M^-1 x`` for ``x`` of shape ``(..., n)``."""
        if self._identity_mass:
            return np.asarray(x, dtype=float)
        return np.asarray(x) @ self._mass_inv

    def mass_inv_grad(self, x: np.ndarray) -> np.ndarray:
        """``M^-1 grad g(x)``, shape ``(..., n, m)``."""
        jt = np.swapaxes(self.dg(x), -1, -2)
        if self._identity_mass:
            return jt
        return self._mass_inv @ jt

    def mass_sqrt_apply(self, x: np.ndarray) -> np.ndarray:
        if self._identity_mass:
            return np.asarray(x, dtype=float)
        return np.asarray(x) @ self._mass_sqrt


def gram_matrix(geo: ConstraintGeometry, x: np.ndarray) -> np.ndarray:
    """``G_M(x) = Dg(x) M^-1 grad g(x)``; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    gm = geo.dg(x) @ geo.mass_inv_grad(x)
    return 0.5 * (gm + np.swapaxes(gm, -1, -2))


def check_conditioning(mats: np.ndarray, limit: float = DEFAULT_COND_LIMIT) -> np.ndarray:
    """Boolean mask (over leading axes) of matrices that are safe to solve with."""
    mats = np.asarray(mats)
    if mats.shape[-1] == 1:
        d = mats[..., 0, 0]
        return np.isfinite(d) & (d != 0.0)
    ok = np.all(np.isfinite(mats), axis=(-1, -2))
    cond = np.full(ok.shape, np.inf)
    if np.any(ok):
        cond[ok] = np.linalg.cond(mats[ok])
    return ok & (cond <= limit)


def solve_checked(mats: np.ndarray, rhs: np.ndarray, limit: float, what: str) -> np.ndarray:
    """Solve ``mats @ x = rhs`` (rhs is ``(..., m)``), raising SingularGram."""
    if not np.all(check_conditioning(mats, limit)):
        raise SingularGram(f"{what} is singular or condition number exceeds {limit:g}")
    return np.linalg.solve(mats, rhs[..., None])[..., 0]


def projector_apply(
    geo: ConstraintGeometry, x: np.ndarray, z: np.ndarray, cond_limit: float = DEFAULT_COND_LIMIT
) -> np.ndarray:
    """``P_M(x) z = z - grad g(x) G_M^-1(x) Dg(x) M^-1 z``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    jac = geo.dg(x)
    coef = solve_checked(
        gram_matrix(geo, x), (jac @ geo.mass_inv_apply(z)[..., None])[..., 0], cond_limit, "Gram matrix"
    )
    return z - (np.swapaxes(jac, -1, -2) @ coef[..., None])[..., 0]


def project_to_manifold(geo: ConstraintGeometry, x: np.ndarray, tol: float = 1e-13, max_iter: int = 50):
    """Pull ``x`` onto ``g = 0`` by Newton steps along ``M^-1 grad g``.

    Used to generate manifold samples for diagnostics; not part of the scheme.
    """
    x = np.array(x, dtype=float)
    for _ in range(max_iter):
        res = geo.g(x)
        if np.max(np.abs(res)) <= tol:
            return x
        step = solve_checked(gram_matrix(geo, x), res, DEFAULT_COND_LIMIT, "Gram matrix")
        x = x - (geo.mass_inv_grad(x) @ step[..., None])[..., 0]
    if np.max(np.abs(geo.g(x))) > 1e3 * tol:
        raise SingularGram("projection onto the manifold did not converge")
    return x


def tangent_projection(geo: ConstraintGeometry, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Component of ``y`` in ``ker Dg(x)`` (Euclidean orthogonal projection)."""
    jac = geo.dg(x)
    coef = solve_checked(jac @ np.swapaxes(jac, -1, -2), (jac @ y[..., None])[..., 0], DEFAULT_COND_LIMIT, "DgDg^T")
    return y - (np.swapaxes(jac, -1, -2) @ coef[..., None])[..., 0]


@dataclass
class DerivativeReport:
    fd_step: float
    tolerance: float
    dg_errors: np.ndarray
    d2g_errors: np.ndarray

    @property
    def flagged(self) -> list[int]:
        bad = (self.dg_errors > self.tolerance) | (self.d2g_errors > self.tolerance)
        return [int(i) for i in np.flatnonzero(bad)]

    @property
    def passed(self) -> bool:
        return not self.flagged


def _rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(exact))))
    return float(np.max(np.abs(approx - exact))) / scale


def check_derivatives(
    geo: ConstraintGeometry, samples: Sequence[np.ndarray], fd_step: float = 1e-5
) -> DerivativeReport:
    """Compare ``dg`` and ``d2g`` against central differences at each sample.

    Errors are max-abs differences relative to ``max(1, max|exact|)``; a
    sample is flagged when either error exceeds ``10 * fd_step``.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    n = geo.n
    eye = np.eye(n)
    dg_err, d2g_err = [], []
    for x in samples:
        x = np.asarray(x, dtype=float)
        pts = np.concatenate([x + fd_step * eye, x - fd_step * eye])
        gv = geo.g(pts)
        fd_jac = ((gv[:n] - gv[n:]) / (2 * fd_step)).T
        dg_err.append(_rel_err(fd_jac, geo.dg(x)))

        jv = geo.dg(pts)
        # fd_hess[i, j, k] ~ d/dx_j (Dg_ik)
        fd_hess = np.transpose((jv[:n] - jv[n:]) / (2 * fd_step), (1, 0, 2))
        exact = _bilinear_tensor(geo.d2g, x)
        d2g_err.append(_rel_err(fd_hess, exact))
    return DerivativeReport(fd_step, 10 * fd_step, np.array(dg_err), np.array(d2g_err))


def _bilinear_tensor(d2g, x: np.ndarray) -> np.ndarray:
    """Assemble ``T[i, j, k] = D^2 g(x)(e_j, e_k)_i``."""
    n = x.shape[-1]
    eye = np.eye(n)
    y = np.repeat(eye, n, axis=0)
    z = np.tile(eye, (n, 1))
    vals = d2g(np.broadcast_to(x, (n * n, n)), y, z)
    return np.transpose(vals.reshape(n, n, -1), (2, 0, 1))


def _trilinear_tensor_fd(d2g, x: np.ndarray, step: float) -> np.ndarray:
    """Central-difference ``T[i, l, j, k] = D^3 g(x)(e_l, e_j, e_k)_i``."""
    n = x.shape[-1]
    out = []
    for l_ in range(n):
        e = np.zeros(n)
        e[l_] = step
        out.append((_bilinear_tensor(d2g, x + e) - _bilinear_tensor(d2g, x - e)) / (2 * step))
    return np.stack(out, axis=1)


def multilinear_norm(tensor: np.ndarray, n_starts: int = 6, iters: int = 200, seed: int = 0) -> float:
    """Operator norm ``sup ||T(y_1, ..., y_k)||`` over unit vectors.

    ``tensor`` has the output index first. Computed by alternating
    maximisation of ``<u, T(y_1, ..., y_k)>`` from several starts, so the
    result is a lower bound that is exact for matrices.
    """
    t = np.asarray(tensor, dtype=float)
    if not np.any(t):
        return 0.0
    if t.ndim == 2:
        return float(np.linalg.norm(t, 2))
    rng = np.random.default_rng(seed)
    best = 0.0
    for s in range(n_starts):
        if s == 0:
            vecs = []
            for ax in range(t.ndim):
                unf = np.moveaxis(t, ax, 0).reshape(t.shape[ax], -1)
                vecs.append(np.linalg.svd(unf, full_matrices=False)[0][:, 0])
        else:
            vecs = [rng.standard_normal(k) for k in t.shape]
            vecs = [v / np.linalg.norm(v) for v in vecs]
        val = 0.0
        for _ in range(iters):
            for ax in range(t.ndim):
                c = t
                for other in reversed(range(t.ndim)):
                    if other != ax:
                        c = np.tensordot(c, vecs[other], axes=([other], [0]))
                nrm = np.linalg.norm(c)
                if nrm == 0:
                    break
                vecs[ax] = c / nrm
            new = nrm
            if abs(new - val) <= 1e-13 * max(1.0, new):
                val = new
                break
            val = new
        best = max(best, float(val))
    return best


def geometry_norms(
    geo: ConstraintGeometry, manifold_samples, ambient_samples, fd_step: float = 1e-4
) -> dict[str, float]:
    """Sampled sup of the five norms entering ``c_g``.

    ``D^3 g`` is not part of the geometry interface, so its norm is estimated
    from central differences of ``d2g``.
    """
    out = {"mass_inv_grad": 0.0, "gram": 0.0, "gram_inv": 0.0, "d2g": 0.0, "d3g": 0.0}
    for x in manifold_samples:
        x = np.asarray(x, dtype=float)
        gm = gram_matrix(geo, x)
        if not check_conditioning(gm[None])[0]:
            raise SingularGram(f"Gram matrix singular at manifold sample {x}")
        out["mass_inv_grad"] = max(out["mass_inv_grad"], float(np.linalg.norm(geo.mass_inv_grad(x), 2)))
        out["gram"] = max(out["gram"], float(np.linalg.norm(gm, 2)))
        out["gram_inv"] = max(out["gram_inv"], float(np.linalg.norm(np.linalg.inv(gm), 2)))
    for x in list(manifold_samples) + list(ambient_samples):
        x = np.asarray(x, dtype=float)
        out["d2g"] = max(out["d2g"], multilinear_norm(_bilinear_tensor(geo.d2g, x)))
        t3 = _trilinear_tensor_fd(geo.d2g, x, fd_step)
        # differences of an exactly polynomial d2g leave rounding noise only
        t3[np.abs(t3) < 1e-7] = 0.0
        out["d3g"] = max(out["d3g"], multilinear_norm(t3))
    return out


def estimate_cg(geo: ConstraintGeometry, manifold_samples, ambient_samples=(), margin: float = 0.5) -> float:
    """Heuristic estimate of ``c_g`` from samples: ``max(1, sup * (1 + margin))``.

    The true constant is a supremum over a neighbourhood of the manifold and
    all of R^n; a finite sample can only bound it from below, which the
    margin partly compensates. ``geo.c_g`` is ignored.
    """
    if len(manifold_samples) == 0:
        raise ValueError("need at least one manifold sample")
    norms = geometry_norms(geo, manifold_samples, ambient_samples)
    return max(1.0, max(norms.values()) * (1.0 + margin))
