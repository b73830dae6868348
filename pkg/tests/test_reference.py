import dataclasses

import numpy as np
import pytest

from holosde.errors import SingularGram, StepError
from holosde.experiments import integrate
from holosde.geometry import project_to_manifold, tangent_projection
from holosde.model import State, make_fiber_chain, make_pendulum, make_sphere_langevin
from holosde.reference import (
    baseline_eta,
    inherent_diffusion,
    inherent_drift,
    integrate_em,
    mu_quadrature,
    starred_growth_constant,
    starred_growth_ratio,
    starred_inner,
)
from holosde.stepper import StepperConfig, lambda_leading_term
from holosde.stochastics import BrownianPath, sample_path


def _zero_path(ell, n, T=1.0):
    return BrownianPath(ell, T, n, np.zeros((n, ell)), 0, 0)


def _tangent_states(problem, rng, count, speed=2.0):
    geo = problem.geometry
    out = []
    for _ in range(count):
        x = project_to_manifold(geo, problem.initial.r + 0.5 * rng.standard_normal(geo.n))
        out.append(State(x, tangent_projection(geo, x, speed * rng.standard_normal(geo.n))))
    return out


def test_pendulum_centripetal_drift():
    p = make_pendulum(0.0)
    w = 1.7
    f = inherent_drift(p, State([1.0, 0.0], [0.0, w]))
    np.testing.assert_allclose(f, [0.0, w, -(w**2), 0.0], atol=1e-15)


def test_normal_drift_is_removed():
    p = make_pendulum(1.0)
    f = inherent_drift(p, State([0.0, 1.0], [0.0, 0.0]))
    np.testing.assert_allclose(f, 0.0, atol=1e-15)


def test_zero_state_zero_drift():
    p = make_pendulum(0.0)
    np.testing.assert_array_equal(inherent_drift(p, State([1.0, 0.0], [0.0, 0.0])), np.zeros(4))


def test_pendulum_diffusion():
    p = make_pendulum(0.0)
    d = inherent_diffusion(p, State([1.0, 0.0], [0.0, 0.0]))
    np.testing.assert_allclose(d, [[0, 0], [0, 0], [0, 0], [0, 1]], atol=1e-15)
    p0 = make_pendulum(0.0, sigma=0.0)
    np.testing.assert_array_equal(inherent_diffusion(p0, State([1.0, 0.0], [0.0, 0.0])), 0.0)


@pytest.mark.parametrize("factory", [make_pendulum, make_sphere_langevin, make_fiber_chain])
def test_differentiated_constraint_identity(factory, rng):
    p = factory()
    geo = p.geometry
    for s in _tangent_states(p, rng, 20):
        f = inherent_drift(p, s)
        second = f[p.n :]
        scale = 1 + np.linalg.norm(s.v) ** 2 + np.linalg.norm(second)
        assert np.linalg.norm(geo.dg(s.r) @ second + geo.d2g(s.r, s.v, s.v)) <= 1e-10 * scale
        np.testing.assert_array_equal(f[: p.n], s.v)
        d = inherent_diffusion(p, s)
        np.testing.assert_array_equal(d[: p.n], 0.0)
        assert np.max(np.abs(geo.dg(s.r) @ d[p.n :])) <= 1e-10


def test_diffusion_tangency_random_b(rng):
    base = make_pendulum(0.0)
    mats = rng.standard_normal((2, 2))
    p = dataclasses.replace(base, diffusion_b=lambda x, y: np.broadcast_to(mats, np.shape(x)[:-1] + (2, 2)))
    for th in rng.uniform(0, 2 * np.pi, 20):
        r = np.array([np.cos(th), np.sin(th)])
        d = inherent_diffusion(p, State(r, [0.0, 0.0]))
        assert np.max(np.abs(r @ d[2:])) <= 1e-10


def test_batched_inherent_drift_matches(rng):
    p = make_fiber_chain(3)
    states = _tangent_states(p, rng, 5)
    x = np.array([np.concatenate([s.r, s.v]) for s in states])
    batch = inherent_drift(p, x)
    for i, s in enumerate(states):
        np.testing.assert_allclose(batch[i], inherent_drift(p, s), atol=1e-14)


def test_singular_gram():
    p = make_pendulum(0.0, r0=(0.0, 0.0), check_initial=False)
    with pytest.raises(SingularGram):
        inherent_drift(p, p.initial)
    with pytest.raises(SingularGram):
        inherent_diffusion(p, p.initial)


def test_em_constraint_drift():
    p = make_pendulum(0.0, sigma=0.0, v0=(0.0, 1.0))
    n = 2**14
    traj = integrate_em(p, n, _zero_path(2, n))
    dev = abs(np.linalg.norm(traj.r[-1]) - 1.0)
    assert 0 < dev < 0.05
    assert traj.constraint_residual[-1] > 0


def test_em_trivial_step():
    p = make_pendulum(0.0)
    traj = integrate_em(p, 1, _zero_path(2, 1))
    np.testing.assert_array_equal(traj.r[1], traj.r[0])
    np.testing.assert_array_equal(traj.v[1], traj.v[0])


def test_truncation_inactive_for_small_steps():
    p = make_pendulum(1.0, v0=(0.0, 0.1))
    path = sample_path(2, 1.0, 1024, 3, 0)
    a = integrate_em(p, 1024, path, truncated=False)
    b = integrate_em(p, 1024, path, truncated=True)
    np.testing.assert_array_equal(a.r, b.r)
    np.testing.assert_array_equal(a.v, b.v)
    assert np.all(b.eta == 1.0)


def test_baseline_eta_formula():
    v = np.array([3.0, 0.0])
    c = np.array([0.0, 4.0])
    assert baseline_eta(v, c, 0.5) == pytest.approx(1.0 / 2.5)
    assert baseline_eta(v, c, 0.1) == 1.0
    assert baseline_eta(np.zeros(2), np.zeros(2), 1.0) == 1.0


def test_em_singular_gram_reports_step():
    p = make_pendulum(0.0, sigma=0.0, r0=(0.5, 0.0), v0=(-1.0, 0.0), check_initial=False)
    # the first step lands exactly on the origin, where the Gram matrix vanishes
    with pytest.raises(StepError) as info:
        integrate_em(p, 4, _zero_path(2, 4, T=2.0))
    assert info.value.step_index == 1
    assert isinstance(info.value.cause, SingularGram)


def test_mu_quadrature_zero():
    p = make_pendulum(0.0, sigma=0.0)
    traj = integrate_em(p, 8, _zero_path(2, 8))
    np.testing.assert_array_equal(mu_quadrature(p, traj, _zero_path(2, 8)), 0.0)


def test_mu_quadrature_circular_motion():
    p = make_pendulum(0.0, sigma=0.0)
    w, n = 1.5, 4096
    t = np.linspace(0, 1, n + 1)
    r = np.stack([np.cos(w * t), np.sin(w * t)], axis=1)
    v = w * np.stack([-np.sin(w * t), np.cos(w * t)], axis=1)
    from holosde.trajectory import Trajectory

    traj = Trajectory(grid=t, r=r, v=v, mu=np.zeros((n + 1, 1)), eta=np.ones(n))
    mu = mu_quadrature(p, traj, np.zeros((n, 2)))
    np.testing.assert_allclose(mu[:, 0], w**2 * t, atol=1e-12)


def test_mu_quadrature_first_step_matches_leading_term(rng):
    p = make_pendulum(1.0)
    r = np.array([0.6, 0.8])
    v = np.array([-0.8, 0.6]) * 0.3
    h = 2.0**-8
    path = BrownianPath(2, 4 * h, 4, np.sqrt(h) * rng.standard_normal((4, 2)), 0, 0)
    traj = integrate(p, StepperConfig(), 4, path, initial=State(r, v))
    mu = mu_quadrature(p, traj, path)
    lead = lambda_leading_term(p, r, v, h, path.fine_increments[0], eta=1.0)
    assert mu[1, 0] == pytest.approx(lead[0], abs=1e-15)


def test_mu_quadrature_consistent_with_scheme():
    p = make_pendulum(1.0)
    errs = []
    for n in (64, 256, 1024):
        path = sample_path(2, 1.0, 1024, 8, 0)
        traj = integrate(p, StepperConfig(), n, path)
        errs.append(np.max(np.abs(traj.mu - mu_quadrature(p, traj, path))))
    assert errs[0] > errs[1] > errs[2]


def test_starred_inner(rng):
    a = rng.standard_normal((2, 2))
    mass = a @ a.T + np.eye(2)
    p = make_pendulum(0.0)
    p = dataclasses.replace(p, geometry=dataclasses.replace(p.geometry, mass=mass))
    x, y = rng.standard_normal(4), rng.standard_normal(4)
    assert starred_inner(p, x, y) == pytest.approx(x[:2] @ y[:2] + x[2:] @ mass @ y[2:])


@pytest.mark.parametrize("factory", [make_pendulum, make_sphere_langevin, make_fiber_chain])
def test_starred_growth_bound(factory, rng):
    p = factory()
    c = starred_growth_constant(p)
    ratios = starred_growth_ratio(p, _tangent_states(p, rng, 50, speed=5.0))
    assert np.all(ratios <= c)
