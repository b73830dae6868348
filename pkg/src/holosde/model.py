"""Problem definitions for constrained stochastic mechanical systems and the
built-in example models (pendulum, constrained Langevin on a sphere, fiber
chain).

Coefficient maps follow the same broadcasting convention as the geometry:
``drift_a(x, y)`` maps ``(..., n), (..., n) -> (..., n)`` and
``diffusion_b(x, y)`` maps to ``(..., n, ell)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np

from holosde.errors import MissingGrowthMeta
from holosde.geometry import ConstraintGeometry

INITIAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class State:
    r: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        v = np.array(self.v, dtype=float)
        if r.shape != v.shape:
            raise ValueError(f"position and velocity shapes differ: {r.shape} vs {v.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
            raise ValueError("state has non-finite entries")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "v", v)

    def residuals(self, geo: ConstraintGeometry) -> tuple[float, float]:
        """``(||g(r)||, ||Dg(r) v||)``."""
        return (
            float(np.linalg.norm(geo.g(self.r))),
            float(np.linalg.norm(geo.dg(self.r) @ self.v)),
        )


@dataclass(frozen=True)
class GrowthMeta:
    """Constants of the one-sided/polynomial growth bounds on ``a`` and ``B``."""

    c_a: float
    p_a: float
    c_b: float


@dataclass(frozen=True, eq=False)
class SdaeProblem:
    geometry: ConstraintGeometry
    ell: int
    drift_a: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion_b: Callable[[np.ndarray, np.ndarray], np.ndarray]
    initial: State
    growth_meta: Optional[GrowthMeta] = None
    name: str = "custom"
    check_initial: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.ell < 1:
            raise ValueError("ell must be >= 1")
        if self.initial.r.shape != (self.geometry.n,):
            raise ValueError(f"initial state must have shape ({self.geometry.n},)")
        if self.check_initial:
            rg, rdg = self.initial.residuals(self.geometry)
            if rg > INITIAL_TOL or rdg > INITIAL_TOL:
                raise ValueError(
                    f"initial state is not on the tangent bundle: |g(r0)|={rg:.3e}, |Dg(r0)v0|={rdg:.3e}"
                )

    @property
    def n(self) -> int:
        return self.geometry.n

    @property
    def m(self) -> int:
        return self.geometry.m


# ---------------------------------------------------------------------------
# Unit-sphere constraint g(x) = (1 - |x|^2) / 2, any dimension.


def _sphere_g(x):
    x = np.asarray(x)
    return 0.5 * (1.0 - np.sum(x * x, axis=-1, keepdims=True))


def _sphere_dg(x):
    return -np.asarray(x, dtype=float)[..., None, :]


def _sphere_d2g(x, y, z):
    return -np.sum(np.asarray(y) * np.asarray(z), axis=-1, keepdims=True)


def sphere_geometry(n: int, c_g: float = 2.0, epsilon: float = 0.5) -> ConstraintGeometry:
    """Unit sphere in R^n with identity mass.

    On the sphere ``M^-1 grad g = -x``, ``G = |x|^2`` and ``D^2 g = -Id``, so
    every norm entering ``c_g`` lies in ``((1 - eps)^2, (1 + eps)^2)`` on the
    ``eps``-neighbourhood. The default 2 is the upper end of the range
    usually quoted for the pendulum.
    """
    return ConstraintGeometry(
        n=n, m=1, g=_sphere_g, dg=_sphere_dg, d2g=_sphere_d2g, mass=np.eye(n), epsilon=epsilon, c_g=c_g
    )


def _constant_drift(x, y, *, value):
    return np.broadcast_to(value, np.broadcast_shapes(np.shape(x), np.shape(value))).copy()


def _scaled_identity(x, y, *, sigma, n):
    x = np.asarray(x)
    return np.broadcast_to(sigma * np.eye(n), x.shape[:-1] + (n, n))


def make_pendulum(
    c_gravity: float = 1.0,
    *,
    sigma: float = 1.0,
    c_g: float = 2.0,
    epsilon: float = 0.5,
    r0=(1.0, 0.0),
    v0=(0.0, 0.0),
    check_initial: bool = True,
) -> SdaeProblem:
    """Planar pendulum of unit length: gravity ``(0, -c_gravity)``, noise ``sigma * Id``."""
    if c_gravity < 0:
        raise ValueError("c_gravity must be >= 0")
    geo = sphere_geometry(2, c_g=c_g, epsilon=epsilon)
    return SdaeProblem(
        geometry=geo,
        ell=2,
        drift_a=partial(_constant_drift, value=np.array([0.0, -float(c_gravity)])),
        diffusion_b=partial(_scaled_identity, sigma=float(sigma), n=2),
        initial=State(r0, v0),
        growth_meta=GrowthMeta(c_a=c_gravity + 1.0, p_a=1.0, c_b=max(2.0, 2.0 * abs(sigma))),
        name="pendulum",
        check_initial=check_initial,
    )


# ---------------------------------------------------------------------------
# Constrained Langevin dynamics: a(x, y) = -grad V(x) - friction * y, B = sigma * Id.


def _langevin_drift(x, y, *, potential_grad, friction):
    return -potential_grad(x) - friction * np.asarray(y)


def cosine_well_grad(x, *, depth: float = 1.0):
    """Gradient of ``V(x) = depth * cos(pi * x_last)``.

    Restricted to the unit sphere this is a double well with minima at the
    poles and the barrier on the equator; the gradient is bounded, so the
    growth conditions hold globally.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    out[..., -1] = -depth * np.pi * np.sin(np.pi * x[..., -1])
    return out


def make_langevin(
    potential_grad: Callable[[np.ndarray], np.ndarray],
    friction: float,
    sigma: float,
    geometry: ConstraintGeometry,
    *,
    initial: Optional[State] = None,
    growth_meta: Optional[GrowthMeta] = None,
    check_initial: bool = True,
) -> SdaeProblem:
    """Constrained Langevin system in position/velocity form.

    Without an explicit ``initial`` state the system starts at rest at the
    first unit vector, which must then lie on the manifold.
    """
    if friction < 0:
        raise ValueError("friction must be >= 0")
    n = geometry.n
    if initial is None:
        e1 = np.zeros(n)
        e1[0] = 1.0
        if np.linalg.norm(geometry.g(e1)) > INITIAL_TOL:
            raise ValueError("first unit vector is not on the manifold; pass initial=")
        initial = State(e1, np.zeros(n))
    return SdaeProblem(
        geometry=geometry,
        ell=n,
        drift_a=partial(_langevin_drift, potential_grad=potential_grad, friction=float(friction)),
        diffusion_b=partial(_scaled_identity, sigma=float(sigma), n=n),
        initial=initial,
        growth_meta=growth_meta,
        name="langevin",
        check_initial=check_initial,
    )


def make_sphere_langevin(
    depth: float = 1.0, friction: float = 1.0, sigma: float = 1.0, c_g: float = 2.0, check_initial: bool = True
) -> SdaeProblem:
    """Built-in Langevin model: unit sphere in R^3 with the cosine double well."""
    geo = sphere_geometry(3, c_g=c_g)
    meta = GrowthMeta(c_a=1.0 + depth * np.pi + friction, p_a=1.0, c_b=max(1.0, abs(sigma) * np.sqrt(3.0)))
    return make_langevin(
        partial(cosine_well_grad, depth=depth),
        friction,
        sigma,
        geo,
        growth_meta=meta,
        check_initial=check_initial,
    )


# ---------------------------------------------------------------------------
# Inextensible fiber: N points in R^3 with unit-free spacing ds.


def _chain_diff(x, npts):
    p = np.asarray(x, dtype=float).reshape(np.shape(x)[:-1] + (npts, 3))
    return p[..., 1:, :] - p[..., :-1, :]


def _chain_g(x, *, npts, ds):
    d = _chain_diff(x, npts)
    return 0.5 - np.sum(d * d, axis=-1) / (2.0 * ds * ds)


def _chain_dg(x, *, npts, ds):
    d = _chain_diff(x, npts) / (ds * ds)
    lead = d.shape[:-2]
    out = np.zeros(lead + (npts - 1, npts, 3))
    idx = np.arange(npts - 1)
    out[..., idx, idx, :] = d
    out[..., idx, idx + 1, :] = -d
    return out.reshape(lead + (npts - 1, 3 * npts))


def _chain_d2g(x, y, z, *, npts, ds):
    dy = _chain_diff(y, npts)
    dz = _chain_diff(z, npts)
    return -np.sum(dy * dz, axis=-1) / (ds * ds)


def _bending_matrix(npts: int, ds: float) -> np.ndarray:
    """``K = D2^T D2 / ds^3`` for the second-difference operator ``D2``, per coordinate."""
    if npts < 3:
        return np.zeros((3 * npts, 3 * npts))
    d2 = np.zeros((npts - 2, npts))
    for i in range(npts - 2):
        d2[i, i : i + 3] = (1.0, -2.0, 1.0)
    k = d2.T @ d2 / ds**3
    return np.kron(k, np.eye(3))


def _fiber_drift(x, y, *, gravity_vec, bending, friction):
    x = np.asarray(x, dtype=float)
    return gravity_vec - x @ bending - friction * np.asarray(y)


def chain_cg_bound(npts: int, ds: float) -> float:
    """Upper bound on the ``c_g`` norms over the chain manifold.

    On the manifold the Gram matrix is tridiagonal with diagonal ``2/ds^2``
    and off-diagonal entries of modulus at most ``1/ds^2``, so its spectrum
    lies in ``[(2 - 2cos(pi/N))/ds^2, 4/ds^2]``; the bilinear second
    derivative is bounded by ``4/ds^2`` and the third derivative vanishes.
    """
    lam_min = (2.0 - 2.0 * np.cos(np.pi / npts)) / ds**2
    return float(max(1.0, 2.0 / ds, 4.0 / ds**2, 1.0 / lam_min))


def make_fiber_chain(
    num_points: int = 4,
    ds: float = 1.0,
    *,
    gravity: float = 1.0,
    bending: float = 1.0,
    friction: float = 0.0,
    sigma: float = 1.0,
    c_g: Optional[float] = None,
    epsilon: float = 0.1,
    direction=(1.0, 0.0, 0.0),
    check_initial: bool = True,
) -> SdaeProblem:
    """Discretised inextensible fiber with simplified forces.

    Forces are constant gravity along ``-e3``, linear bending stiffness from
    the squared discrete Laplacian, optional linear friction, and isotropic
    noise ``sigma * Id`` with one Brownian component per coordinate. The
    chain starts straight along ``direction`` at rest.

    ``c_g`` defaults to 1.5 times :func:`chain_cg_bound`, the same margin the
    sampled estimator applies.
    """
    if num_points < 2:
        raise ValueError("num_points must be >= 2")
    if ds <= 0:
        raise ValueError("ds must be positive")
    n = 3 * num_points
    if c_g is None:
        c_g = 1.5 * chain_cg_bound(num_points, ds)
    geo = ConstraintGeometry(
        n=n,
        m=num_points - 1,
        g=partial(_chain_g, npts=num_points, ds=ds),
        dg=partial(_chain_dg, npts=num_points, ds=ds),
        d2g=partial(_chain_d2g, npts=num_points, ds=ds),
        mass=np.eye(n),
        epsilon=epsilon,
        c_g=c_g,
    )
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    r0 = (np.arange(num_points)[:, None] * ds * direction[None, :]).ravel()
    gvec = np.tile([0.0, 0.0, -float(gravity)], num_points)
    kmat = bending * _bending_matrix(num_points, ds)
    kmax = float(np.linalg.norm(kmat, 2)) if num_points >= 3 else 0.0
    meta = GrowthMeta(
        c_a=1.0 + abs(gravity) * np.sqrt(num_points) + kmax + friction,
        p_a=1.0,
        c_b=max(1.0, abs(sigma) * np.sqrt(n)),
    )
    return SdaeProblem(
        geometry=geo,
        ell=n,
        drift_a=partial(_fiber_drift, gravity_vec=gvec, bending=kmat, friction=float(friction)),
        diffusion_b=partial(_scaled_identity, sigma=float(sigma), n=n),
        initial=State(r0, np.zeros(n)),
        growth_meta=meta,
        name="fiber",
        check_initial=check_initial,
    )


# ---------------------------------------------------------------------------


@dataclass
class GrowthViolation:
    sample: int
    condition: str
    lhs: float
    rhs: float


def check_growth(problem: SdaeProblem, samples) -> list[GrowthViolation]:
    """Evaluate the growth inequalities on ``a`` and ``B`` at sample states.

    Checks ``<(x,y),(y,a)> <= C_a (1 + |(x,y)|^2)``,
    ``|a| <= C_a (1 + |(x,y)|^p_a)`` and ``|B|_F <= C_B (1 + |(x,y)|)``.
    Returns the list of violations; empty means every sample passed.
    """
    meta = problem.growth_meta
    if meta is None:
        raise MissingGrowthMeta(f"problem {problem.name!r} has no growth constants")
    out = []
    for i, s in enumerate(samples):
        x, y = s.r, s.v
        a = np.asarray(problem.drift_a(x, y))
        b = np.asarray(problem.diffusion_b(x, y))
        nrm2 = float(x @ x + y @ y)
        nrm = np.sqrt(nrm2)
        slack = 1e-12 * (1.0 + nrm2)
        checks = (
            ("one_sided", float(x @ y + y @ a), meta.c_a * (1.0 + nrm2)),
            ("poly_a", float(np.linalg.norm(a)), meta.c_a * (1.0 + nrm**meta.p_a)),
            ("linear_b", float(np.linalg.norm(b)), meta.c_b * (1.0 + nrm)),
        )
        for name, lhs, rhs in checks:
            if lhs > rhs + slack:
                out.append(GrowthViolation(i, name, lhs, rhs))
    return out
