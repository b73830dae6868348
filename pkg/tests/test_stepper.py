import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from holosde.errors import KappaBoundViolation, NewtonDivergence, SingularGram
from holosde.geometry import ConstraintGeometry, project_to_manifold, tangent_projection
from holosde.model import SdaeProblem, State, make_fiber_chain, make_pendulum, sphere_geometry
from holosde.stepper import (
    KappaBoundWarning,
    StepperConfig,
    lambda_leading_term,
    solve_position,
    solve_velocity,
    step,
    step_batch,
    trace_branch,
    truncation_eta,
)


def _tangent(theta, speed):
    r = np.array([np.cos(theta), np.sin(theta)])
    return r, speed * np.array([-r[1], r[0]])


# truncation ---------------------------------------------------------------


def test_eta_hand_value():
    # c_g = 1 gives c_eta = 1/4; gravity of size 1 gives |a| = 1
    p = make_pendulum(1.0, c_g=1.0)
    assert truncation_eta(p, np.array([1.0, 0.0]), np.array([0.0, 2.0]), 0.1) == pytest.approx(0.625, rel=1e-15)


def test_eta_clamps_at_one():
    p = make_pendulum(0.0)
    assert truncation_eta(p, np.array([1.0, 0.0]), np.array([0.0, 0.1]), 1e-6) == 1.0
    assert truncation_eta(p, np.array([1.0, 0.0]), np.zeros(2), 1.0) == 1.0


def test_eta_requires_positive_h():
    with pytest.raises(ValueError):
        truncation_eta(make_pendulum(), np.array([1.0, 0.0]), np.zeros(2), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(1e-6, 2.0), st.floats(1e-6, 2.0))
def test_eta_range_and_monotone(speed, h1, h2):
    p = make_pendulum(1.0)
    r, v = _tangent(0.3, speed)
    e1, e2 = truncation_eta(p, r, v, h1), truncation_eta(p, r, v, h2)
    assert 0.0 < e1 <= 1.0 and 0.0 < e2 <= 1.0
    if h1 <= h2:
        assert e1 >= e2
    # displacement bound
    assert e1 * speed * h1 <= p.geometry.constants.c_eta * (1 + 1e-12)


def test_eta_batched_matches_scalar():
    p = make_pendulum(1.0)
    rng = np.random.default_rng(0)
    r = rng.standard_normal((6, 2))
    v = 5 * rng.standard_normal((6, 2))
    batch = truncation_eta(p, r, v, 0.1)
    assert batch.shape == (6,)
    for i in range(6):
        assert batch[i] == truncation_eta(p, r[i], v[i], 0.1)


# position solve ---------------------------------------------------------------


def test_position_spec_example(config):
    p = make_pendulum(0.0)
    r, v = np.array([1.0, 0.0]), np.array([0.0, 0.5])
    r_next, kappa, diag = solve_position(p, config, r, v, 0.1, eta=1.0)
    kc = 1.0 - np.sqrt(1.0 - 0.0025)
    assert kappa[0] == pytest.approx(1.2508e-3, abs=1e-7)
    assert abs(kappa[0] - kc) < 1e-15
    np.testing.assert_allclose(r_next, [1.0 - kc, 0.05], atol=1e-15)
    assert np.linalg.norm(r_next) == pytest.approx(1.0, abs=1e-12)
    assert diag.residual <= config.newton_tol
    assert not diag.used_homotopy and not diag.bound_violated


def test_position_zero_velocity(config, fiber3):
    r_next, kappa, diag = solve_position(fiber3, config, fiber3.initial.r, np.zeros(9), 0.5)
    np.testing.assert_array_equal(kappa, 0.0)
    np.testing.assert_array_equal(r_next, fiber3.initial.r)
    assert diag.newton_iters == 0


def test_position_matches_bracketing_oracle(config, rng):
    p = make_pendulum(1.0)
    geo = p.geometry
    for _ in range(200):
        r, v = _tangent(rng.uniform(0, 2 * np.pi), rng.uniform(0, 4))
        h = 10 ** rng.uniform(-3, 0)
        eta = truncation_eta(p, r, v, h)
        base = r + eta * h * v

        def f(k):
            return float(geo.g(base - k * r)[0])

        # near root lies in [0, c_kappa]; f changes sign there
        oracle = brentq(f, -1e-12, geo.constants.c_kappa, xtol=1e-16, rtol=4 * np.finfo(float).eps)
        _, kappa, _ = solve_position(p, config, r, v, h)
        assert abs(kappa[0] - oracle) <= 1e-12


def test_far_root_rejected_in_enforce_mode(config, rng):
    p = make_pendulum(0.0)
    ck = p.geometry.constants.c_kappa
    for _ in range(50):
        r, v = _tangent(rng.uniform(0, 2 * np.pi), rng.uniform(0.1, 3))
        h = 0.05
        eta = truncation_eta(p, r, v, h)
        s = eta * np.linalg.norm(v) * h
        far = 1 + np.sqrt(1 - s * s)
        _, kappa, diag = solve_position(p, config, r, v, h, kappa_init=np.array([far]))
        assert abs(kappa[0]) < ck
        assert abs(kappa[0] - s * s / (1 + np.sqrt(1 - s * s))) < 1e-14
        assert diag.used_homotopy


def test_warn_mode_reports_far_root_origin():
    p = make_pendulum(0.0)
    cfg = StepperConfig(kappa_bound_mode="warn")
    r, v = _tangent(0.7, 1.0)
    h = 0.05
    s = truncation_eta(p, r, v, h) * h
    far = 1 + np.sqrt(1 - s * s)
    with pytest.warns(KappaBoundWarning):
        _, kappa, diag = solve_position(p, cfg, r, v, h, kappa_init=np.array([far + 0.01]))
    assert kappa[0] == pytest.approx(far, abs=1e-12)
    assert diag.bound_violated
    # continued back to tau = 0 the far root does not reach the origin
    assert diag.branch_origin[0] == pytest.approx(2.0, abs=1e-9)
    # while the admissible root continues back to zero
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _, near, d2 = solve_position(p, cfg, r, v, h)
    assert not d2.bound_violated
    assert abs(trace_branch(p, cfg, r, v, h, near, 1.0, 0.0)[0]) < 1e-12


def _linear_problem(offset):
    a = np.array([[1.0, 0.0]])
    geo = ConstraintGeometry(
        n=2,
        m=1,
        g=lambda x: np.asarray(x)[..., :1] - offset,
        dg=lambda x: np.broadcast_to(a, np.shape(x)[:-1] + a.shape),
        d2g=lambda x, y, z: np.zeros(np.shape(x)[:-1] + (1,)),
        mass=np.eye(2),
        epsilon=1.0,
        c_g=2.0,
    )
    pend = make_pendulum(0.0)
    return SdaeProblem(geo, 2, pend.drift_a, pend.diffusion_b, State([0.0, 0.0], [0.0, 0.0]), check_initial=False)


def test_bound_violation_raised(config):
    # the only root is kappa = -1.5 c_kappa, outside the admissible ball
    p = _linear_problem(1.5 / 128)
    with pytest.raises(KappaBoundViolation):
        solve_position(p, config, np.zeros(2), np.zeros(2), 0.1)
    with pytest.raises(KappaBoundViolation):
        step(p, config, p.initial, 0.1, np.zeros(2))


def test_newton_divergence_raised(config):
    geo = dataclasses.replace(sphere_geometry(2), g=lambda x: 0.5 * (1.0 + np.sum(np.square(x), axis=-1, keepdims=True)))
    p = SdaeProblem(geo, 2, make_pendulum(0.0).drift_a, make_pendulum(0.0).diffusion_b, State([1.0, 0.0], [0.0, 0.0]), check_initial=False)
    with pytest.raises(NewtonDivergence):
        solve_position(p, StepperConfig(homotopy_max_depth=3), np.array([1.0, 0.0]), np.zeros(2), 0.1)


def test_singular_gram_raised(config):
    p = make_pendulum(0.0, check_initial=False, r0=(0.0, 0.0))
    with pytest.raises(SingularGram):
        solve_position(p, config, np.zeros(2), np.zeros(2), 0.1)
    with pytest.raises(SingularGram):
        step(p, config, p.initial, 0.1, np.zeros(2))


def test_config_validation():
    with pytest.raises(ValueError):
        StepperConfig(kappa_bound_mode="ignore")
    with pytest.raises(ValueError):
        StepperConfig(newton_tol=0.0)
    with pytest.raises(ValueError):
        StepperConfig(newton_max_iter=0)


# velocity solve -----------------------------------------------------------------


def test_velocity_spec_example(config):
    p = make_pendulum(0.0)
    r, v = np.array([1.0, 0.0]), np.array([0.0, 0.5])
    r_next, _, _ = solve_position(p, config, r, v, 0.1, eta=1.0)
    v_next, lam = solve_velocity(p, config, r, r_next, v, 0.1, np.zeros(2), eta=1.0)
    expected = (r_next @ v) / (r_next @ r)
    assert lam[0] == pytest.approx(2.5031e-2, abs=1e-6)
    assert abs(lam[0] - expected) < 1e-15
    np.testing.assert_allclose(v_next, v - r * lam[0], atol=1e-16)
    assert abs(r_next @ v_next) < 1e-15


def test_velocity_zero_rhs(config):
    p = make_pendulum(0.0)
    r = np.array([1.0, 0.0])
    v = np.array([0.0, 0.3])
    v_next, lam = solve_velocity(p, config, r, r, v, 0.1, np.zeros(2))
    assert lam[0] == 0.0
    np.testing.assert_array_equal(v_next, v)


def test_velocity_fiber_tangency(config, fiber3, rng):
    geo = fiber3.geometry
    for _ in range(20):
        r = project_to_manifold(geo, fiber3.initial.r + 0.2 * rng.standard_normal(9))
        v = tangent_projection(geo, r, rng.standard_normal(9))
        h = 0.01
        r_next, _, _ = solve_position(fiber3, config, r, v, h)
        v_next, _ = solve_velocity(fiber3, config, r, r_next, v, h, np.sqrt(h) * rng.standard_normal(9))
        assert np.linalg.norm(geo.dg(r_next) @ v_next) <= 1e-10 * (1 + np.linalg.norm(v_next))


# full step ---------------------------------------------------------------------


def test_step_composes_closed_forms(config):
    p = make_pendulum(0.0)
    r, v = _tangent(1.1, 0.4)
    h = 2.0**-6
    assert truncation_eta(p, r, v, h) == 1.0
    state, rec = step(p, config, State(r, v), h, np.zeros(2))
    s = np.linalg.norm(v) * h
    kc = s * s / (1 + np.sqrt(1 - s * s))
    rc = (1 - kc) * r + h * v
    lc = (rc @ v) / (rc @ r)
    np.testing.assert_allclose(state.r, rc, atol=1e-15)
    np.testing.assert_allclose(state.v, v - r * lc, atol=1e-15)
    assert rec.eta == 1.0
    assert rec.kappa[0] == pytest.approx(kc, abs=1e-15)
    assert rec.lam[0] == pytest.approx(lc, abs=1e-15)
    assert rec.constraint_residual <= config.newton_tol
    assert rec.tangency_residual <= 1e-10


def test_step_fixed_point(config, fiber3):
    p = dataclasses.replace(fiber3, drift_a=lambda x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))))
    state, rec = step(p, config, p.initial, 0.1, np.zeros(9))
    np.testing.assert_array_equal(state.r, p.initial.r)
    np.testing.assert_array_equal(state.v, p.initial.v)
    np.testing.assert_array_equal(rec.kappa, 0.0)
    np.testing.assert_array_equal(rec.lam, 0.0)


def test_step_deterministic(config, pendulum, rng):
    dw = rng.standard_normal(2) * 0.1
    s0 = State([0.6, 0.8], [-0.8, 0.6])
    a, ra = step(pendulum, config, s0, 0.01, dw)
    b, rb = step(pendulum, config, s0, 0.01, dw)
    assert a.r.tobytes() == b.r.tobytes() and a.v.tobytes() == b.v.tobytes()
    assert ra.lam.tobytes() == rb.lam.tobytes()


def test_step_batch_matches_single(config, pendulum, rng):
    r = np.array([_tangent(t, 1.0)[0] for t in rng.uniform(0, 6, 8)])
    v = np.array([_tangent(t, s)[1] for t, s in zip(np.arctan2(r[:, 1], r[:, 0]), rng.uniform(0, 3, 8))])
    dw = 0.1 * rng.standard_normal((8, 2))
    out = step_batch(pendulum, config, r, v, 0.01, dw)
    for i in range(8):
        s, rec = step(pendulum, config, State(r[i], v[i]), 0.01, dw[i])
        np.testing.assert_array_equal(out["r"][i], s.r)
        np.testing.assert_array_equal(out["v"][i], s.v)
        np.testing.assert_array_equal(out["lam"][i], rec.lam)


def test_step_batch_marks_failures(config):
    p = make_pendulum(0.0)
    r = np.array([[1.0, 0.0], [0.0, 0.0]])
    out = step_batch(p, config, r, np.zeros((2, 2)), 0.1, np.zeros((2, 2)))
    assert out["status"].tolist() == [0, 3]
    assert np.all(np.isnan(out["r"][1]))


def test_step_warn_mode_records(pendulum):
    cfg = StepperConfig(kappa_bound_mode="warn")
    s, rec = step(pendulum, cfg, State([0.6, 0.8], [-0.8, 0.6]), 0.01, np.array([0.1, -0.2]))
    s2, rec2 = step(pendulum, StepperConfig(), State([0.6, 0.8], [-0.8, 0.6]), 0.01, np.array([0.1, -0.2]))
    np.testing.assert_allclose(s.r, s2.r, atol=1e-15)
    np.testing.assert_allclose(rec.lam, rec2.lam, atol=1e-14)


# leading term ---------------------------------------------------------------


def test_leading_term_zero(fiber3):
    p = dataclasses.replace(fiber3, drift_a=lambda x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))))
    np.testing.assert_array_equal(lambda_leading_term(p, p.initial.r, np.zeros(9), 0.1, np.zeros(9)), 0.0)


def test_leading_term_pendulum_closed_form():
    p = make_pendulum(0.0)
    r, v = _tangent(2.0, 0.7)
    h = 0.01
    eta = truncation_eta(p, r, v, h)
    lead = lambda_leading_term(p, r, v, h, np.zeros(2))
    assert lead[0] == pytest.approx(eta * 0.49 * h, rel=1e-14)


def test_leading_term_singular():
    p = make_pendulum(0.0, check_initial=False, r0=(0.0, 0.0))
    with pytest.raises(SingularGram):
        lambda_leading_term(p, np.zeros(2), np.zeros(2), 0.1, np.zeros(2))


def _remainder_slope(problem, r, v, hs, dw_fn):
    cfg = StepperConfig()
    res = []
    for h in hs:
        dw = dw_fn(h)
        r_next, _, _ = solve_position(problem, cfg, r, v, h)
        _, lam = solve_velocity(problem, cfg, r, r_next, v, h, dw)
        res.append(np.linalg.norm(lam - lambda_leading_term(problem, r, v, h, dw)))
    return np.polyfit(np.log(hs), np.log(res), 1)[0]


def test_drift_remainder_second_order():
    p = make_pendulum(0.25)
    hs = 2.0 ** -np.arange(4, 11)
    slope = _remainder_slope(p, np.array([1.0, 0.0]), np.array([0.0, 0.4]), hs, lambda h: np.zeros(2))
    assert abs(slope - 2.0) <= 0.3
