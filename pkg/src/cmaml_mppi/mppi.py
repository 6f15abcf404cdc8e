"""Sampling-based MPC (MPPI) over the learned dynamics model.

Each call perturbs the warm-started command sequence with i.i.d. Gaussian
noise, rolls all K candidates through the model, scores them with the
track/speed stage cost and averages the perturbations with softmin weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DivergenceError, ControlInput, Model, Pose, VehicleState, rollout_array
from .track import Costmap, track_cost


@dataclass(frozen=True)
class MppiConfig:
    samples: int = 256
    horizon: int = 100
    temperature: float = 50.0
    noise_std: tuple = (0.15, 0.20)  # steering, acceleration (normalised units)
    track_weight: float = 600.0
    speed_weight: float = 25.0
    v_ref: float = 3.2
    dt: float = 0.02

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("MPPI needs at least 2 samples")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if len(self.noise_std) != 2 or min(self.noise_std) <= 0:
            raise ValueError("noise_std needs two positive entries")
        if self.horizon < 1 or self.dt <= 0:
            raise ValueError("horizon and dt must be positive")


def stage_cost(s: VehicleState, p: Pose, costmap: Costmap, cfg: MppiConfig) -> float:
    return cfg.track_weight * track_cost(costmap, p.X, p.Y) + cfg.speed_weight * (s.vx - cfg.v_ref) ** 2


def stage_costs(states: np.ndarray, poses: np.ndarray, costmap: Costmap, cfg: MppiConfig) -> np.ndarray:
    """Vectorised stage cost over arrays (..., 4) and (..., 3)."""
    tc = track_cost(costmap, poses[..., 0], poses[..., 1])
    dv = states[..., 1] - cfg.v_ref
    return cfg.track_weight * tc + cfg.speed_weight * dv * dv


def softmin_weights(costs: np.ndarray, lam: float) -> np.ndarray:
    """exp(-(S - min S)/lam), normalised; infinite costs get zero weight."""
    if lam <= 0:
        raise ValueError("temperature must be positive")
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        raise ValueError("no costs")
    finite = np.isfinite(costs)
    if not finite.any():
        raise DivergenceError("all MPPI rollouts diverged")
    w = np.zeros_like(costs)
    w[finite] = np.exp(-(costs[finite] - costs[finite].min()) / lam)
    return w / w.sum()


def mppi_update(prev: np.ndarray, noise: np.ndarray, cost_fn, lam: float, lower=-1.0, upper=1.0):
    """Generic MPPI iteration.

    ``prev`` (H, m), ``noise`` (K, H, m); ``cost_fn`` maps clamped candidate
    sequences (K, H, m) to costs (K,). Returns the updated (unshifted)
    sequence, weights and costs. Perturbations are taken as the clamped
    difference so the update stays inside the command box.
    """
    raw = prev[None] + noise
    cand = np.clip(raw, lower, upper)
    eff = np.where(raw == cand, noise, cand - prev[None])
    costs = np.asarray(cost_fn(cand), dtype=float)
    costs = np.where(np.isfinite(costs), costs, np.inf)
    w = softmin_weights(costs, lam)
    # fixed-order reduction for reproducibility
    delta = np.tensordot(w, eff, axes=(0, 0))
    return prev + delta, w, costs


def shift(seq: np.ndarray) -> np.ndarray:
    """Warm start: drop the first command and repeat the last one."""
    return np.concatenate([seq[1:], seq[-1:]], axis=0)


def rollout_costs(model: Model, s: np.ndarray, p: np.ndarray, controls: np.ndarray,
                  costmap: Costmap, cfg: MppiConfig) -> np.ndarray:
    states, poses = rollout_array(model, s, p, controls, cfg.dt, dtype=np.float32)
    with np.errstate(invalid="ignore", over="ignore"):
        c = stage_costs(states, poses, costmap, cfg).sum(axis=1)
    return np.where(np.isfinite(c), c, np.inf)


def mppi_step(model: Model, s: VehicleState, p: Pose, prev: np.ndarray, costmap: Costmap,
              cfg: MppiConfig, rng: np.random.Generator):
    """One receding-horizon MPPI step.

    Returns ``(command, next_sequence, telemetry)``; ``next_sequence`` is
    already shifted for the following call.
    """
    prev = np.asarray(prev, dtype=float)
    if prev.shape != (cfg.horizon, 2):
        raise ValueError(f"control sequence must be ({cfg.horizon}, 2), got {prev.shape}")
    if not np.all(np.isfinite(model.theta)):
        raise DivergenceError("model parameters are not finite")
    noise = rng.standard_normal((cfg.samples, cfg.horizon, 2)) * np.asarray(cfg.noise_std)
    sa, pa = s.as_array(), p.as_array()
    seq, w, costs = mppi_update(prev, noise, lambda u: rollout_costs(model, sa, pa, u, costmap, cfg),
                                cfg.temperature)
    cmd = ControlInput.from_array(np.clip(seq[0], -1.0, 1.0))
    finite = costs[np.isfinite(costs)]
    telemetry = {
        "cost_min": float(finite.min()),
        "cost_mean": float(finite.mean()),
        "ess": float(1.0 / np.sum(w * w)),
    }
    return cmd, shift(seq), telemetry
