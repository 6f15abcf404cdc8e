"""Prequential replay of a recorded drive log through an adaptation policy.

At every control step the current parameters are scored on the freshest
N_c-sample window (the inference loss). Every update period the adaptive
modes then learn from that same window, so each loss is measured before
the model has seen the window it is scored on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adaptation as ad
from .dynamics import Model, batch_loss_and_grad
from .trajlog import Trajectory


@dataclass
class ReplayResult:
    mode: str
    times: np.ndarray  # time stamp of the last sample of each scored window
    losses: np.ndarray
    surfaces: list
    events: list
    n_updates: int

    @property
    def cumulative_mean(self) -> float:
        return float(np.mean(self.losses))


def boundary_flags(surfaces) -> np.ndarray:
    """True on every sample whose surface id differs from the previous sample's."""
    s = np.asarray(surfaces, dtype=object)
    flags = np.zeros(len(s), dtype=bool)
    if len(s) > 1:
        flags[1:] = s[1:] != s[:-1]
    return flags


def replay(model: Model, traj: Trajectory, cfg: ad.AdaptConfig, seed: int, record_events: bool = True) -> ReplayResult:
    """Score and adapt along ``traj``; the log itself is never modified."""
    n_c = cfg.n_c
    if len(traj) < n_c:
        raise ValueError(f"log has {len(traj)} samples, fewer than one {n_c}-sample window")
    if abs(traj.dt - cfg.control_dt) > 1e-9:
        raise ValueError(f"log spacing {traj.dt} s does not match the control period {cfg.control_dt} s")
    state = ad.init_state(model, np.random.default_rng([seed, 3]))
    flags = boundary_flags(traj.surfaces)
    k_update = cfg.steps_per_update
    events = [] if record_events else None
    times, losses, surfs = [], [], []
    pending = False
    for k in range(len(traj)):
        pending = pending or bool(flags[k])
        if k + 1 < n_c:
            continue
        start = k + 1 - n_c
        sl = slice(start, k + 1)
        loss = batch_loss_and_grad(state.model, traj.states[None, sl], traj.poses[None, sl], traj.inputs[None, sl],
                                   traj.dt, with_grad=False)[0][0]
        times.append(traj.times[k])
        losses.append(float(loss))
        surfs.append(traj.surfaces[k])
        if cfg.mode != "fixed" and (k + 1) % k_update == 0:
            state = ad.on_sample(state, traj.window(start, n_c), pending, cfg, events)
            pending = False
    return ReplayResult(cfg.mode, np.asarray(times), np.asarray(losses), surfs, events or [], state.n_updates)
