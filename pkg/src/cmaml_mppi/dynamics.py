"""Learned discrete-time vehicle model and its multi-step rollout loss.

State x = [phi, vx, vy, r] (roll, body-frame velocities, yaw rate) advances by
explicit Euler, x(t+1) = x(t) + f(x(t), v(t)) dt, with f the MLP from
:mod:`cmaml_mppi.nn`. The world pose [X, Y, psi] is integrated kinematically
from the pre-update state. The rollout loss seeds a prediction from the first
measured sample of a window and sums squared errors of X, Y, phi and psi.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

STATE_DIM = 4
POSE_DIM = 3
INPUT_DIM = 2
DT = 0.02


class DivergenceError(RuntimeError):
    """The learned model produced a non-finite state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class VehicleState:
    phi: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    r: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, self.vx, self.vy, self.r], dtype=float)

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class Pose:
    X: float = 0.0
    Y: float = 0.0
    psi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.psi], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Pose":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class ControlInput:
    """Normalised steering (u1) and acceleration (u2) commands."""

    u1: float = 0.0
    u2: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.u1, self.u2], dtype=float)

    @classmethod
    def from_array(cls, a) -> "ControlInput":
        return cls(float(a[0]), float(a[1]))

    def perturbed(self, eps1: float, eps2: float) -> "ControlInput":
        return ControlInput(self.u1 + eps1, self.u2 + eps2)

    def clamped(self) -> "ControlInput":
        return ControlInput(min(max(self.u1, -1.0), 1.0), min(max(self.u2, -1.0), 1.0))


@dataclass(frozen=True)
class Model:
    """Network parameters plus the frozen input/output scaling."""

    theta: np.ndarray
    norm: nn.Normalizer = nn.Normalizer()

    def with_theta(self, theta: np.ndarray) -> "Model":
        return Model(theta, self.norm)


@dataclass(frozen=True)
class SampleWindow:
    """Consecutive measured samples spaced ``dt`` apart.

    ``states`` (N, 4), ``poses`` (N, 3), ``inputs`` (N, 2). The input at index
    k is the command applied between samples k and k+1.
    """

    states: np.ndarray
    poses: np.ndarray
    inputs: np.ndarray
    dt: float = DT
    t0: float = 0.0

    def __post_init__(self):
        n = len(self.states)
        if self.states.shape != (n, STATE_DIM) or self.poses.shape != (n, POSE_DIM) or self.inputs.shape != (n, INPUT_DIM):
            raise ValueError(
                f"inconsistent window shapes {self.states.shape}, {self.poses.shape}, {self.inputs.shape}"
            )
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @classmethod
    def from_samples(cls, samples, dt: float = DT, t0: float = 0.0) -> "SampleWindow":
        """Build from an iterable of (VehicleState, Pose, ControlInput) tuples."""
        samples = list(samples)
        return cls(
            np.array([s.as_array() for s, _, _ in samples]).reshape(-1, STATE_DIM),
            np.array([p.as_array() for _, p, _ in samples]).reshape(-1, POSE_DIM),
            np.array([u.as_array() for _, _, u in samples]).reshape(-1, INPUT_DIM),
            dt,
            t0,
        )

    def translated(self, dx: float, dy: float) -> "SampleWindow":
        poses = self.poses.copy()
        poses[:, 0] += dx
        poses[:, 1] += dy
        return SampleWindow(self.states, poses, self.inputs, self.dt, self.t0)


# ---------------------------------------------------------------- array core


def derivatives(model: Model, states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """f(x, v) for batched states (..., 4) and inputs (..., 2)."""
    z = model.norm(np.concatenate([states, inputs], axis=-1))
    return nn.forward(model.theta, z) * model.norm.out_scale


def step_array(model: Model, states: np.ndarray, inputs: np.ndarray, dt: float) -> np.ndarray:
    return states + derivatives(model, states, inputs) * dt


def pose_step_array(poses: np.ndarray, states: np.ndarray, dt: float) -> np.ndarray:
    """Kinematic pose update using the pre-update heading and velocities."""
    psi = poses[..., 2]
    c, s = np.cos(psi), np.sin(psi)
    vx, vy, r = states[..., 1], states[..., 2], states[..., 3]
    out = np.empty(np.broadcast_shapes(poses.shape, states.shape[:-1] + (3,)), dtype=np.result_type(poses, states, 0.0))
    out[..., 0] = poses[..., 0] + (vx * c - vy * s) * dt
    out[..., 1] = poses[..., 1] + (vx * s + vy * c) * dt
    out[..., 2] = psi + r * dt
    return out


def _folded_layers(model: Model, dtype):
    """Network layers with the input normaliser folded into the first layer."""
    (w1, b1), (w2, b2), (w3, b3) = nn.unpack(model.theta)
    w1f = w1 / model.norm.std
    b1f = b1 - w1f @ model.norm.mean
    scale = model.norm.out_scale
    layers = ((w1f, b1f), (w2, b2), (w3 * scale[:, None], b3 * scale))
    return [(w.T.astype(dtype), b.astype(dtype)) for w, b in layers]


def rollout_array(model: Model, s0: np.ndarray, p0: np.ndarray, inputs: np.ndarray, dt: float,
                  dtype=np.float64):
    """Batched rollout: s0 (B, 4), p0 (B, 3), inputs (B, T, 2) -> states (B, T, 4), poses (B, T, 3).

    Entry k holds the state/pose after applying ``inputs[:, k]``. Non-finite
    values propagate silently; callers decide how to treat them. ``dtype``
    float32 roughly halves the cost for large sampling batches.
    """
    b, t_len = inputs.shape[0], inputs.shape[1]
    (w1, b1), (w2, b2), (w3, b3) = _folded_layers(model, dtype)
    w1s, w1u = w1[:STATE_DIM], w1[STATE_DIM:]
    inputs = np.asarray(inputs, dtype=dtype)
    states = np.empty((b, t_len, STATE_DIM), dtype=dtype)
    poses = np.empty((b, t_len, POSE_DIM), dtype=dtype)
    s = np.array(np.broadcast_to(s0, (b, STATE_DIM)), dtype=dtype)
    p = np.array(np.broadcast_to(p0, (b, POSE_DIM)), dtype=dtype)
    dt = dtype(dt)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(t_len):
            p = pose_step_array(p, s, dt)
            h = np.tanh(s @ w1s + inputs[:, k] @ w1u + b1)
            h = np.tanh(h @ w2 + b2)
            s = s + (h @ w3 + b3) * dt
            states[:, k] = s
            poses[:, k] = p
    return states, poses


# ---------------------------------------------------------------- scalar API


def step(model: Model, s: VehicleState, u: ControlInput, dt: float = DT) -> VehicleState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = step_array(model, s.as_array(), u.as_array(), dt)
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite model state from {s}", state=s)
    return VehicleState.from_array(x)


def propagate_pose(p: Pose, s: VehicleState, dt: float = DT) -> Pose:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return Pose.from_array(pose_step_array(p.as_array(), s.as_array(), dt))


def rollout(model: Model, s0: VehicleState, p0: Pose, inputs, dt: float = DT):
    """Sequence of (VehicleState, Pose) after each input."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("rollout needs at least one input")
    out = []
    s, p = s0, p0
    for u in inputs:
        p = propagate_pose(p, s, dt)
        s = step(model, s, u, dt)
        out.append((s, p))
    return out


# ---------------------------------------------------------------- loss


def _stack(windows):
    if isinstance(windows, SampleWindow):
        windows = [windows]
    for w in windows:
        if len(w) < 2:
            raise ValueError("window needs at least 2 samples")
    n = len(windows[0])
    if any(len(w) != n for w in windows):
        raise ValueError("all windows in a batch must have equal length")
    dt = windows[0].dt
    return (
        np.stack([w.states for w in windows]),
        np.stack([w.poses for w in windows]),
        np.stack([w.inputs for w in windows]),
        dt,
    )


def batch_loss_and_grad(model: Model, states, poses, inputs, dt, with_grad=True):
    """Per-window rollout losses (B,) and the gradient of their sum.

    Arrays are (B, N, dim). Backpropagates through the whole state recurrence.
    """
    b, n = states.shape[0], states.shape[1]
    theta, norm = model.theta, model.norm
    scale = norm.out_scale
    s = states[:, 0]
    p = poses[:, 0]
    s_hist = [s]
    p_hist = [p]
    caches = []
    for k in range(n - 1):
        z = norm(np.concatenate([s, inputs[:, k]], axis=-1))
        out, cache = nn._forward_cache(theta, z)
        caches.append(cache)
        p = pose_step_array(p, s, dt)
        s = s + out * scale * dt
        s_hist.append(s)
        p_hist.append(p)
    s_pred = np.stack(s_hist, axis=1)
    p_pred = np.stack(p_hist, axis=1)
    # residuals at indices 1..N-1 on X, Y, psi and phi
    rp = p_pred[:, 1:] - poses[:, 1:]
    rphi = s_pred[:, 1:, 0] - states[:, 1:, 0]
    losses = (rp * rp).sum(axis=(1, 2)) + (rphi * rphi).sum(axis=1)
    if not with_grad:
        return losses, None
    if not np.all(np.isfinite(losses)):
        raise DivergenceError("non-finite rollout loss")

    grad = np.zeros(nn.N_PARAMS)
    lam_s = np.zeros((b, STATE_DIM))
    lam_p = np.zeros((b, POSE_DIM))
    inv_std = 1.0 / norm.std[:STATE_DIM]
    for k in range(n - 1, 0, -1):
        # adjoints at index k: direct loss terms plus what flows back from k+1
        lam_p = lam_p + 2.0 * rp[:, k - 1]
        lam_s = lam_s.copy()
        lam_s[:, 0] += 2.0 * rphi[:, k - 1]
        # transition k-1 -> k
        sp, pp = s_hist[k - 1], p_hist[k - 1]
        psi = pp[:, 2]
        c, sn = np.cos(psi), np.sin(psi)
        vx, vy = sp[:, 1], sp[:, 2]
        g_out = lam_s * (scale * dt)
        _, g_in = nn._backward_cache(theta, caches[k - 1], g_out, grad)
        new_lam_s = lam_s + g_in[:, :STATE_DIM] * inv_std
        new_lam_s[:, 1] += (lam_p[:, 0] * c + lam_p[:, 1] * sn) * dt
        new_lam_s[:, 2] += (-lam_p[:, 0] * sn + lam_p[:, 1] * c) * dt
        new_lam_s[:, 3] += lam_p[:, 2] * dt
        new_lam_p = lam_p.copy()
        new_lam_p[:, 2] += (lam_p[:, 0] * (-vx * sn - vy * c) + lam_p[:, 1] * (vx * c - vy * sn)) * dt
        lam_s, lam_p = new_lam_s, new_lam_p
    return losses, grad


def rollout_loss(model: Model, window: SampleWindow) -> float:
    s, p, u, dt = _stack(window)
    return float(batch_loss_and_grad(model, s, p, u, dt, with_grad=False)[0][0])


def window_loss_and_grad(model: Model, window: SampleWindow):
    """Rollout loss of one window and its exact gradient w.r.t. ``model.theta``."""
    s, p, u, dt = _stack(window)
    losses, grad = batch_loss_and_grad(model, s, p, u, dt)
    return float(losses[0]), grad


def windows_loss_and_grad(model: Model, windows):
    """Mean loss over a batch of equal-length windows and the gradient of that mean."""
    s, p, u, dt = _stack(windows)
    losses, grad = batch_loss_and_grad(model, s, p, u, dt)
    return float(losses.mean()), grad / len(losses)
