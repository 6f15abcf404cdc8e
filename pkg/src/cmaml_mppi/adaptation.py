"""Online adaptation policies for the dynamics network: fixed, gradient descent, Continual-MAML.

Continual-MAML keeps meta parameters (the initialisation) and fast
parameters (what the controller uses). Every update period the fast
parameters take one SGD step on the freshest window. When the surface
changes, the meta parameters take one Adam step on the MAML objective built
from the two buffered windows, the buffers are emptied and the fast
parameters restart from the meta parameters. The meta parameters also take
a periodic step every ``meta_period`` seconds without resetting the fast
parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .dynamics import DivergenceError, Model, SampleWindow, rollout_loss, window_loss_and_grad

log = logging.getLogger(__name__)

MODES = ("fixed", "gd", "cmaml")
META_GRADS = ("exact-hvp", "first-order")


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "cmaml"
    update_period: float = 0.08
    n_c: int = 14
    eta: float = 0.1
    meta_lr: float = 1e-4
    meta_period: float = 0.4
    meta_grad: str = "exact-hvp"
    hvp_eps: float = 1e-4
    grad_clip: float = 10.0
    p_keep: float = 0.5  # probability of leaving both full buffers untouched
    control_dt: float = 0.02

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.meta_grad not in META_GRADS:
            raise ValueError(f"meta_grad must be one of {META_GRADS}")
        steps = self.update_period / self.control_dt
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ValueError("update_period must be a positive multiple of the control period")
        ratio = self.meta_period / self.update_period
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("meta_period must be a positive multiple of update_period")
        if self.eta < 0 or self.meta_lr <= 0:
            raise ValueError("learning rates must be non-negative (eta) / positive (meta_lr)")
        if not 0.0 <= self.p_keep <= 1.0:
            raise ValueError("p_keep must be a probability")

    @property
    def steps_per_update(self) -> int:
        return int(round(self.update_period / self.control_dt))

    @property
    def updates_per_meta(self) -> int:
        return int(round(self.meta_period / self.update_period))


@dataclass(frozen=True)
class AdaptState:
    meta: np.ndarray
    fast: np.ndarray
    norm: nn.Normalizer
    adam: nn.AdamState
    rng: np.random.Generator
    train: SampleWindow | None = None
    test: SampleWindow | None = None
    ticks_since_meta: int = 0
    n_updates: int = 0

    @property
    def model(self) -> Model:
        """Model the controller should use right now."""
        return Model(self.fast, self.norm)


def init_state(model: Model, seed=0) -> AdaptState:
    """Meta and fast parameters both start from the shared checkpoint."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return AdaptState(model.theta.copy(), model.theta.copy(), model.norm, nn.AdamState.zeros(), rng)


def _clip(grad, limit):
    if limit is None or limit <= 0:
        return grad, 1.0
    n = float(np.linalg.norm(grad))
    if n > limit:
        scale = limit / n
        return grad * scale, scale
    return grad, 1.0


def _check(theta):
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("non-finite parameters after adaptation step")
    return theta


def fast_adapt(theta, norm, train: SampleWindow, eta: float, grad_clip: float | None = None):
    """theta' = theta - eta * grad L_train(theta). Returns ``(theta', effective eta)``."""
    if eta <= 0:
        return theta, 0.0
    _, g = window_loss_and_grad(Model(theta, norm), train)
    g, scale = _clip(g, grad_clip)
    return _check(nn.sgd_step(theta, g, eta)), eta * scale


def fine_tune(theta, norm, window: SampleWindow, eta: float, grad_clip: float | None = None):
    """One SGD step from the previous fast parameters on the current window."""
    return fast_adapt(theta, norm, window, eta, grad_clip)[0]


def maml_gradient(theta, train_grad, test_grad, eta: float, mode: str = "exact-hvp",
                  grad_clip: float | None = None, hvp_eps: float = 1e-4):
    """Gradient of L_test(theta - eta * grad L_train(theta)) for arbitrary gradient closures.

    exact-hvp: (I - eta_eff H_train(theta)) grad L_test(theta'), with the
    Hessian-vector product by central differences of the training gradient.
    first-order: grad L_test(theta'). The clip factor on the inner step is
    treated as a constant (eta_eff = eta * scale).
    """
    if mode not in META_GRADS:
        raise ValueError(f"unknown meta-gradient mode {mode!r}")
    g_train, scale = _clip(train_grad(theta), grad_clip)
    eta_eff = eta * scale if eta > 0 else 0.0
    adapted = theta - eta_eff * g_train
    g_test = test_grad(adapted)
    if mode == "first-order" or eta_eff == 0.0 or np.linalg.norm(g_test) < 1e-12:
        return g_test
    return g_test - eta_eff * nn.hvp(theta, train_grad, g_test, hvp_eps)


def meta_gradient(theta, norm, train: SampleWindow, test: SampleWindow, eta: float,
                  mode: str = "exact-hvp", grad_clip: float | None = None, hvp_eps: float = 1e-4):
    """Meta-gradient of the rollout loss on ``test`` after one fast step on ``train``."""

    def train_grad(th):
        return window_loss_and_grad(Model(th, norm), train)[1]

    def test_grad(th):
        return window_loss_and_grad(Model(th, norm), test)[1]

    return maml_gradient(theta, train_grad, test_grad, eta, mode, grad_clip, hvp_eps)


def meta_update(theta, norm, train, test, eta, lr, adam: nn.AdamState, mode="exact-hvp",
                grad_clip: float | None = None, hvp_eps: float = 1e-4):
    """One Adam step on the meta objective; no-op when a buffer is missing."""
    if train is None or test is None:
        log.info("meta update skipped: buffer empty")
        return theta, adam, 0.0
    g = meta_gradient(theta, norm, train, test, eta, mode, grad_clip, hvp_eps)
    g, _ = _clip(g, grad_clip)
    new, adam = nn.adam_step(theta, g, adam, lr)
    return _check(new), adam, float(np.linalg.norm(g))


def buffer_insert(a: AdaptState, window: SampleWindow, p_keep: float = 0.5) -> AdaptState:
    """Size-1 train/test buffers with random replacement once both are full."""
    if a.train is None:
        return replace(a, train=window)
    if a.test is None:
        return replace(a, test=window)
    u = a.rng.random()
    if u < p_keep:
        return a
    if u < p_keep + (1.0 - p_keep) / 2.0:
        return replace(a, train=window)
    return replace(a, test=window)


@dataclass
class UpdateEvent:
    time: float
    mode: str
    event: str
    loss_before: float
    loss_after: float
    grad_norm: float


def on_sample(a: AdaptState, window: SampleWindow, boundary: bool, cfg: AdaptConfig,
              events: list | None = None) -> AdaptState:
    """Apply one update period's worth of adaptation for ``cfg.mode``.

    ``events`` (optional list) receives :class:`UpdateEvent` records.
    """
    if cfg.mode == "fixed":
        return a
    if len(window) != cfg.n_c:
        log.warning("adaptation skipped: window has %d samples, expected %d", len(window), cfg.n_c)
        if events is not None:
            events.append(UpdateEvent(window.t0, cfg.mode, "skipped", np.nan, np.nan, 0.0))
        return a
    t = float(window.times[-1])
    norm = a.norm

    def record(kind, before_theta, after_theta, gnorm, w=window):
        if events is not None:
            events.append(UpdateEvent(t, cfg.mode, kind, rollout_loss(Model(before_theta, norm), w),
                                      rollout_loss(Model(after_theta, norm), w), gnorm))

    if cfg.mode == "gd":
        fast = fine_tune(a.fast, norm, window, cfg.eta, cfg.grad_clip)
        record("fine_tune", a.fast, fast, float(np.linalg.norm(fast - a.fast)) / cfg.eta)
        return replace(a, fast=fast, n_updates=a.n_updates + 1)

    if boundary:
        meta, adam, gnorm = meta_update(a.meta, norm, a.train, a.test, cfg.eta, cfg.meta_lr, a.adam,
                                        cfg.meta_grad, cfg.grad_clip, cfg.hvp_eps)
        if a.train is not None and a.test is not None:
            record("meta_boundary", a.meta, meta, gnorm)
        fast = fine_tune(meta, norm, window, cfg.eta, cfg.grad_clip)
        record("reset", a.fast, fast, float(np.linalg.norm(fast - meta)) / max(cfg.eta, 1e-300))
        return replace(a, meta=meta, fast=fast, adam=adam, train=None, test=None, ticks_since_meta=0,
                       n_updates=a.n_updates + 1)

    a = buffer_insert(a, window, cfg.p_keep)
    fast = fine_tune(a.fast, norm, window, cfg.eta, cfg.grad_clip)
    record("fine_tune", a.fast, fast, float(np.linalg.norm(fast - a.fast)) / max(cfg.eta, 1e-300))
    meta, adam, ticks = a.meta, a.adam, a.ticks_since_meta + 1
    if ticks >= cfg.updates_per_meta:
        if a.train is not None and a.test is not None:
            meta, adam, gnorm = meta_update(a.meta, norm, a.train, a.test, cfg.eta, cfg.meta_lr, a.adam,
                                            cfg.meta_grad, cfg.grad_clip, cfg.hvp_eps)
            record("meta_periodic", a.meta, meta, gnorm, a.test)
        ticks = 0
    return replace(a, meta=meta, fast=fast, adam=adam, ticks_since_meta=ticks, n_updates=a.n_updates + 1)
