import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmaml_mppi import nn
from cmaml_mppi.dynamics import (
    ControlInput,
    DivergenceError,
    Model,
    Pose,
    SampleWindow,
    VehicleState,
    propagate_pose,
    rollout,
    rollout_array,
    rollout_loss,
    step,
    window_loss_and_grad,
)


def zero_model():
    return Model(np.zeros(nn.N_PARAMS))


def const_model(out):
    theta = np.zeros(nn.N_PARAMS)
    nn.unpack(theta)[2][1][:] = out
    return Model(theta)


def random_model(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    norm = nn.Normalizer(np.array([0.0, 2.0, 0.0, 0.0, 0.0, 0.0]), np.array([0.02, 0.7, 0.15, 1.3, 0.55, 0.3]))
    return Model(nn.init_params(rng) * scale, norm)


def random_window(seed, n=14):
    rng = np.random.default_rng(seed)
    states = np.column_stack([0.01 * rng.standard_normal(n), 2 + 0.3 * rng.standard_normal(n),
                              0.1 * rng.standard_normal(n), rng.standard_normal(n)])
    poses = np.column_stack([rng.standard_normal(n) * 0.1 + np.linspace(0, 0.5, n),
                             rng.standard_normal(n) * 0.1, rng.standard_normal(n) * 0.1])
    return SampleWindow(states, poses, rng.uniform(-1, 1, (n, 2)))


def generated_window(model, s0, p0, inputs, dt=0.02):
    traj = rollout(model, s0, p0, [ControlInput(*u) for u in inputs[:-1]], dt)
    samples = [(s0, p0, ControlInput(*inputs[0]))]
    samples += [(s, p, ControlInput(*u)) for (s, p), u in zip(traj, inputs[1:])]
    return SampleWindow.from_samples(samples, dt)


def test_step_zero_model_unchanged():
    s = VehicleState(0.01, 2.0, 0.1, 0.5)
    assert step(zero_model(), s, ControlInput(0.3, -0.2), 0.02) == s


def test_step_constant_derivative():
    s = VehicleState(0.0, 1.0, 0.0, 0.0)
    out = step(const_model([0, 1, 0, 0]), s, ControlInput(), 0.02)
    assert out.vx == pytest.approx(1.02, abs=1e-15)
    assert (out.phi, out.vy, out.r) == (0.0, 0.0, 0.0)


def test_step_rejects_bad_dt_and_divergence():
    with pytest.raises(ValueError):
        step(zero_model(), VehicleState(), ControlInput(), 0.0)
    with pytest.raises(DivergenceError) as exc:
        step(const_model([np.inf, 0, 0, 0]), VehicleState(), ControlInput(), 0.02)
    assert exc.value.state == VehicleState()


def test_pose_straight_and_rotated():
    p = propagate_pose(Pose(0, 0, 0), VehicleState(0, 1, 0, 0), 0.02)
    assert (p.X, p.Y, p.psi) == (pytest.approx(0.02), 0.0, 0.0)
    p = propagate_pose(Pose(0, 0, math.pi / 2), VehicleState(0, 1, 0, 0), 0.02)
    assert p.X == pytest.approx(0.0, abs=1e-15) and p.Y == pytest.approx(0.02)


def test_pose_uses_pre_update_heading():
    p = propagate_pose(Pose(0, 0, 0), VehicleState(0, 1, 0, 10.0), 0.1)
    assert p.Y == 0.0 and p.psi == pytest.approx(1.0)


def test_circle_closes():
    dt = 0.02
    n = int(round(2 * math.pi / dt))
    s = VehicleState(0, 1, 0, 1)
    p = Pose(0, 0, 0)
    xs = []
    for _ in range(n):
        p = propagate_pose(p, s, dt)
        xs.append((p.X, p.Y))
    xs = np.array(xs)
    assert math.hypot(p.X, p.Y) < 0.05
    # centre of the left-turning circle sits at (0, 1)
    radii = np.hypot(xs[:, 0], xs[:, 1] - 1.0)
    assert np.all(np.abs(radii - 1.0) < 0.05)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(0, 5), st.floats(-2, 2), st.floats(-3, 3))
def test_pose_preserves_speed(psi, vx, vy, r):
    dt = 0.02
    p = propagate_pose(Pose(1.0, -2.0, psi), VehicleState(0, vx, vy, r), dt)
    speed = math.hypot(p.X - 1.0, p.Y + 2.0) / dt
    assert speed == pytest.approx(math.hypot(vx, vy), abs=1e-12)


def test_rollout_length_and_consistency():
    m = random_model(0)
    s0, p0 = VehicleState(0, 2, 0, 0), Pose(0, 1, 0)
    us = [ControlInput(0.1 * k % 1, 0.2) for k in range(7)]
    out = rollout(m, s0, p0, us)
    assert len(out) == 7
    assert len(rollout(m, s0, p0, us[:1])) == 1
    s, p = s0, p0
    for u, (so, po) in zip(us, out):
        p = propagate_pose(p, s)
        s = step(m, s, u)
        assert s == so and p == po
    with pytest.raises(ValueError):
        rollout(m, s0, p0, [])


def test_rollout_array_matches_scalar_path():
    m = random_model(1)
    s0, p0 = VehicleState(0.01, 2, 0.1, 0.3), Pose(0.5, 1, 0.2)
    us = np.random.default_rng(1).uniform(-1, 1, (9, 2))
    out = rollout(m, s0, p0, [ControlInput(*u) for u in us])
    st_, po = rollout_array(m, s0.as_array()[None], p0.as_array()[None], us[None], 0.02)
    np.testing.assert_allclose(st_[0], [s.as_array() for s, _ in out], atol=1e-12)
    np.testing.assert_allclose(po[0], [p.as_array() for _, p in out], atol=1e-12)


def test_zero_model_static_pose():
    out = rollout(zero_model(), VehicleState(), Pose(1, 2, 0.3), [ControlInput(1, 1)] * 20)
    assert all(p == Pose(1, 2, 0.3) for _, p in out)


def test_loss_zero_on_generated_window_and_zero_grad():
    m = random_model(2)
    inputs = np.random.default_rng(2).uniform(-1, 1, (14, 2))
    w = generated_window(m, VehicleState(0, 2, 0, 0.5), Pose(0, 0, 0.1), inputs)
    loss, grad = window_loss_and_grad(m, w)
    assert loss == pytest.approx(0.0, abs=1e-24)
    assert np.max(np.abs(grad)) < 1e-12


def test_loss_translation_invariant():
    m = random_model(3)
    w = random_window(3)
    assert rollout_loss(m, w.translated(5.0, -3.0)) == pytest.approx(rollout_loss(m, w), rel=1e-9)


def test_loss_rejects_short_window():
    w = random_window(0, n=1)
    with pytest.raises(ValueError):
        rollout_loss(zero_model(), w)


@pytest.mark.parametrize("seed", range(4))
def test_window_gradient_matches_finite_differences(seed):
    m = random_model(seed)
    w = random_window(seed + 10, n=8)
    _, g = window_loss_and_grad(m, w)
    eps = 1e-5
    fd = np.empty(nn.N_PARAMS)
    for i in range(nn.N_PARAMS):
        e = np.zeros(nn.N_PARAMS)
        e[i] = eps
        fd[i] = (rollout_loss(m.with_theta(m.theta + e), w) - rollout_loss(m.with_theta(m.theta - e), w)) / (2 * eps)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7 * np.max(np.abs(fd)))


def test_sgd_step_descends_window_loss():
    m = random_model(5)
    w = random_window(5)
    loss, g = window_loss_and_grad(m, w)
    eta = 0.1
    for _ in range(20):
        new = rollout_loss(m.with_theta(nn.sgd_step(m.theta, g, eta)), w)
        if new < loss:
            break
        eta /= 2
    assert new < loss


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_non_negative(seed):
    assert rollout_loss(random_model(seed % 7), random_window(seed)) >= 0.0


def test_output_scale_gradient_and_rollout_paths():
    m = random_model(6)
    norm = nn.Normalizer(m.norm.mean, m.norm.std, np.array([0.3, 2.0, 5.0, 20.0]))
    m = Model(0.2 * m.theta, norm)
    w = random_window(16, n=6)
    _, g = window_loss_and_grad(m, w)
    eps = 1e-6
    rng = np.random.default_rng(0)
    for i in rng.choice(nn.N_PARAMS, 40, replace=False):
        e = np.zeros(nn.N_PARAMS)
        e[i] = eps
        fd = (rollout_loss(m.with_theta(m.theta + e), w) - rollout_loss(m.with_theta(m.theta - e), w)) / (2 * eps)
        assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-7 * np.max(np.abs(g)))
    s0, p0 = VehicleState(0.01, 2, 0.1, 0.3), Pose(0.5, 1, 0.2)
    us = np.random.default_rng(1).uniform(-1, 1, (5, 2))
    out = rollout(m, s0, p0, [ControlInput(*u) for u in us])
    st_, _ = rollout_array(m, s0.as_array()[None], p0.as_array()[None], us[None], 0.02)
    np.testing.assert_allclose(st_[0], [s.as_array() for s, _ in out], atol=1e-12)
    # a constant unit raw output becomes the scale itself
    theta = np.zeros(nn.N_PARAMS)
    nn.unpack(theta)[2][1][:] = 1.0
    assert step(Model(theta, norm), VehicleState(), ControlInput(), 0.1).r == pytest.approx(2.0)
