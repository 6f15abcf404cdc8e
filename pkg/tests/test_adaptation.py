import numpy as np
import pytest

from cmaml_mppi import nn
from cmaml_mppi import adaptation as ad
from cmaml_mppi.dynamics import Model, SampleWindow, rollout_loss, window_loss_and_grad


def make_model(seed=0):
    rng = np.random.default_rng(seed)
    norm = nn.Normalizer(np.array([0.0, 2.0, 0.0, 0.0, 0.0, 0.0]), np.array([0.02, 0.7, 0.15, 1.3, 0.55, 0.3]))
    return Model(nn.init_params(rng), norm)


def make_window(seed, n=14, t0=0.0):
    rng = np.random.default_rng(seed)
    states = np.column_stack([0.01 * rng.standard_normal(n), 2 + 0.3 * rng.standard_normal(n),
                              0.1 * rng.standard_normal(n), rng.standard_normal(n)])
    poses = np.column_stack([np.linspace(0, 0.5, n) + 0.02 * rng.standard_normal(n),
                             0.02 * rng.standard_normal(n), 0.05 * rng.standard_normal(n)])
    return SampleWindow(states, poses, rng.uniform(-1, 1, (n, 2)), 0.02, t0)


# closed-form and dense oracles for the meta-gradient

@pytest.mark.parametrize("a,b,eta,theta", [(2.0, 3.0, 0.1, 1.5), (0.5, 1.0, 0.3, -2.0), (4.0, 0.7, 0.05, 0.3)])
def test_meta_gradient_1d_quadratic_closed_form(a, b, eta, theta):
    got = ad.maml_gradient(np.array([theta]), lambda t: a * t, lambda t: b * t, eta, "exact-hvp", None, 1e-3)
    assert got[0] == pytest.approx(b * (1 - eta * a) ** 2 * theta, abs=1e-6)
    fo = ad.maml_gradient(np.array([theta]), lambda t: a * t, lambda t: b * t, eta, "first-order")
    assert fo[0] == pytest.approx(b * (1 - eta * a) * theta, abs=1e-12)


def _tiny_net(n_in=3, n_h=4, n_out=2):
    """Loss/gradient pair for a 26-parameter tanh net on fixed data."""

    def unpack(th):
        o = 0
        W1 = th[o:o + n_h * n_in].reshape(n_h, n_in); o += n_h * n_in
        b1 = th[o:o + n_h]; o += n_h
        W2 = th[o:o + n_out * n_h].reshape(n_out, n_h); o += n_out * n_h
        return W1, b1, W2, th[o:o + n_out]

    def make(x, y):
        def loss(th):
            W1, b1, W2, b2 = unpack(th)
            return float(np.sum((np.tanh(x @ W1.T + b1) @ W2.T + b2 - y) ** 2))

        def grad(th):
            W1, b1, W2, b2 = unpack(th)
            h = np.tanh(x @ W1.T + b1)
            go = 2 * (h @ W2.T + b2 - y)
            d = (go @ W2) * (1 - h * h)
            return np.concatenate([(d.T @ x).ravel(), d.sum(0), (go.T @ h).ravel(), go.sum(0)])
        return loss, grad

    return make, n_h * n_in + n_h + n_out * n_h + n_out


def test_meta_gradient_matches_dense_hessian_oracle():
    make, n = _tiny_net()
    assert n <= 30
    rng = np.random.default_rng(0)
    tr_loss, tr_grad = make(rng.standard_normal((6, 3)), rng.standard_normal((6, 2)))
    te_loss, te_grad = make(rng.standard_normal((6, 3)), rng.standard_normal((6, 2)))
    theta = 0.5 * rng.standard_normal(n)
    eta = 0.05
    # dense Hessian from second differences of the scalar training loss
    h = 1e-4
    eye = np.eye(n)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            H[i, j] = (tr_loss(theta + h * eye[i] + h * eye[j]) - tr_loss(theta + h * eye[i] - h * eye[j])
                       - tr_loss(theta - h * eye[i] + h * eye[j]) + tr_loss(theta - h * eye[i] - h * eye[j])) / (4 * h * h)
    adapted = theta - eta * tr_grad(theta)
    oracle = (np.eye(n) - eta * H) @ te_grad(adapted)
    got = ad.maml_gradient(theta, tr_grad, te_grad, eta, "exact-hvp")
    np.testing.assert_allclose(got, oracle, atol=1e-4)
    # and the meta objective's own finite-difference gradient
    obj = lambda th: te_loss(th - eta * tr_grad(th))
    fd = np.array([(obj(theta + 1e-6 * e) - obj(theta - 1e-6 * e)) / 2e-6 for e in eye])
    np.testing.assert_allclose(got, fd, atol=1e-4)


def test_eta_zero_exact_equals_first_order():
    m, tr, te = make_model(), make_window(1), make_window(2)
    a = ad.meta_gradient(m.theta, m.norm, tr, te, 0.0, "exact-hvp")
    b = ad.meta_gradient(m.theta, m.norm, tr, te, 0.0, "first-order")
    assert np.array_equal(a, b)


def test_exact_and_first_order_differ_by_order_eta():
    m, tr, te = make_model(3), make_window(3), make_window(4)
    diffs = []
    for eta in (1e-3, 1e-2):
        a = ad.meta_gradient(m.theta, m.norm, tr, te, eta, "exact-hvp")
        b = ad.meta_gradient(m.theta, m.norm, tr, te, eta, "first-order")
        diffs.append(np.linalg.norm(a - b))
    assert 0 < diffs[0] < diffs[1]
    assert diffs[1] / diffs[0] == pytest.approx(10.0, rel=0.1)


def test_meta_update_zero_gradient_and_missing_buffer():
    m = make_model()
    adam = nn.AdamState.zeros()
    theta, adam2, g = ad.meta_update(m.theta, m.norm, None, make_window(0), 0.1, 1e-4, adam)
    assert theta is m.theta and adam2 is adam and g == 0.0
    zero = Model(np.zeros(nn.N_PARAMS), m.norm)
    # stationary windows generated by the zero model have zero loss and zero gradient
    n = 14
    still = SampleWindow(np.zeros((n, 4)), np.zeros((n, 3)), np.zeros((n, 2)))
    theta, adam2, _ = ad.meta_update(zero.theta, zero.norm, still, still, 0.1, 1e-4, adam)
    assert np.array_equal(theta, zero.theta) and adam2.t == adam.t + 1


def test_meta_update_moves_by_lr():
    m, tr, te = make_model(5), make_window(5), make_window(6)
    theta, adam, g = ad.meta_update(m.theta, m.norm, tr, te, 0.1, 1e-4, nn.AdamState.zeros(), grad_clip=10.0)
    step = np.abs(theta - m.theta)
    assert g > 0 and step.max() == pytest.approx(1e-4, rel=1e-3)


# fast parameters

def test_fast_adapt_arithmetic_and_descent():
    m, w = make_model(7), make_window(7)
    _, g = window_loss_and_grad(m, w)
    new, eta_eff = ad.fast_adapt(m.theta, m.norm, w, 0.1, None)
    np.testing.assert_array_equal(new, m.theta - 0.1 * g)
    assert eta_eff == 0.1
    eta = 0.1
    while rollout_loss(m.with_theta(ad.fast_adapt(m.theta, m.norm, w, eta, 10.0)[0]), w) >= rollout_loss(m, w):
        eta /= 2
        assert eta > 1e-8
    still = SampleWindow(np.zeros((14, 4)), np.zeros((14, 3)), np.zeros((14, 2)))
    zero = np.zeros(nn.N_PARAMS)
    assert np.array_equal(ad.fast_adapt(zero, m.norm, still, 0.1)[0], zero)


def test_fast_adapt_clip_scales_step():
    m, w = make_model(8), make_window(8)
    _, g = window_loss_and_grad(m, w)
    limit = 0.5 * np.linalg.norm(g)
    new, eta_eff = ad.fast_adapt(m.theta, m.norm, w, 0.1, limit)
    assert np.linalg.norm(new - m.theta) == pytest.approx(0.1 * limit)
    assert eta_eff == pytest.approx(0.05)


def test_fine_tune_deterministic():
    m, w = make_model(9), make_window(9)
    assert np.array_equal(ad.fine_tune(m.theta, m.norm, w, 0.1, 10.0), ad.fine_tune(m.theta, m.norm, w, 0.1, 10.0))


# buffers and scheduling

def test_buffer_fill_order():
    a = ad.init_state(make_model(), 0)
    w1, w2 = make_window(1), make_window(2)
    a = ad.buffer_insert(a, w1)
    assert a.train is w1 and a.test is None
    a = ad.buffer_insert(a, w2)
    assert a.train is w1 and a.test is w2


def test_buffer_replacement_frequencies():
    a = ad.init_state(make_model(), 123)
    a = ad.buffer_insert(ad.buffer_insert(a, make_window(1)), make_window(2))
    new = make_window(3)
    counts = {"keep": 0, "train": 0, "test": 0}
    n = 10_000
    for _ in range(n):
        b = ad.buffer_insert(a, new)
        key = "train" if b.train is new else "test" if b.test is new else "keep"
        assert not (b.train is new and b.test is new)
        counts[key] += 1
        a = ad.replace(a, rng=b.rng)
    assert abs(counts["train"] / n - 0.25) < 0.02
    assert abs(counts["test"] / n - 0.25) < 0.02
    assert abs(counts["keep"] / n - 0.5) < 0.02


def test_fixed_mode_is_bit_identical():
    cfg = ad.AdaptConfig(mode="fixed")
    a0 = ad.init_state(make_model(), 0)
    a = a0
    for k in range(20):
        a = ad.on_sample(a, make_window(k), k % 7 == 3, cfg)
    assert np.array_equal(a.fast, a0.fast) and np.array_equal(a.meta, a0.meta)


def test_gd_mode_only_fine_tunes():
    cfg = ad.AdaptConfig(mode="gd")
    a0 = ad.init_state(make_model(), 0)
    w = make_window(1)
    a = ad.on_sample(a0, w, True, cfg)
    np.testing.assert_array_equal(a.fast, ad.fine_tune(a0.fast, a0.norm, w, cfg.eta, cfg.grad_clip))
    assert np.array_equal(a.meta, a0.meta) and a.train is None


def test_cmaml_boundary_with_empty_buffers():
    cfg = ad.AdaptConfig()
    a0 = ad.init_state(make_model(), 0)
    a0 = ad.replace(a0, fast=a0.fast + 0.01)
    w = make_window(2)
    events = []
    a = ad.on_sample(a0, w, True, cfg, events)
    assert np.array_equal(a.meta, a0.meta)
    assert a.train is None and a.test is None
    np.testing.assert_array_equal(a.fast, ad.fine_tune(a0.meta, a0.norm, w, cfg.eta, cfg.grad_clip))
    assert [e.event for e in events] == ["reset"]


def test_cmaml_schedule():
    cfg = ad.AdaptConfig()
    assert cfg.steps_per_update == 4 and cfg.updates_per_meta == 5
    a = ad.init_state(make_model(), 0)
    events = []
    for k in range(5):
        prev_meta = a.meta
        a = ad.on_sample(a, make_window(10 + k, t0=0.08 * k), False, cfg, events)
        assert a.train is not None
        if k < 4:
            assert np.array_equal(a.meta, prev_meta)
    assert not np.array_equal(a.meta, prev_meta)  # periodic meta step on the 5th update
    assert [e.event for e in events].count("meta_periodic") == 1
    # boundary: meta step from the full buffers, buffers cleared, fast reset from meta
    before = a.meta
    a = ad.on_sample(a, make_window(30), True, cfg, events)
    assert a.train is None and a.test is None and a.ticks_since_meta == 0
    assert not np.array_equal(a.meta, before)
    assert events[-2].event == "meta_boundary" and events[-1].event == "reset"
    np.testing.assert_array_equal(a.fast, ad.fine_tune(a.meta, a.norm, make_window(30), cfg.eta, cfg.grad_clip))


def test_on_sample_skips_wrong_window_length():
    cfg = ad.AdaptConfig(mode="gd")
    a0 = ad.init_state(make_model(), 0)
    events = []
    a = ad.on_sample(a0, make_window(0, n=10), False, cfg, events)
    assert a is a0 and events[0].event == "skipped"


def test_config_validation():
    with pytest.raises(ValueError):
        ad.AdaptConfig(mode="maml")
    with pytest.raises(ValueError):
        ad.AdaptConfig(update_period=0.05)
    with pytest.raises(ValueError):
        ad.AdaptConfig(meta_period=0.5)
    with pytest.raises(ValueError):
        ad.AdaptConfig(meta_grad="second")
