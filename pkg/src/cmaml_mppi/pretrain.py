"""Offline data collection and training of the dynamics network on cement."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .dynamics import DT, ControlInput, DivergenceError, Model, SampleWindow, batch_loss_and_grad
from .sim import SimConfig, SimState, SimulationDivergence, SurfaceMap, observe, sim_step, surface_at
from .dynamics import Pose, VehicleState
from .trajlog import Trajectory, TrajectoryRecorder

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExcitationConfig:
    """Ornstein-Uhlenbeck command excitation with a speed governor and homing."""

    log_dt: float = 0.01
    command_dt: float = 0.02
    tau: float = 0.4  # OU correlation time (s)
    steer_std: float = 0.55
    accel_std: float = 0.35
    speed_range: tuple = (1.0, 3.6)
    speed_hold: float = 3.0  # mean time between speed-target changes (s)
    speed_gain: float = 0.8
    workspace: float = 12.0  # half-size of the allowed square (m)
    home_radius: float = 5.0
    segment_s: float = 20.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    horizon: int = 100
    stride: int = 25
    grad_clip: float = 100.0
    holdout_fraction: float = 0.1


class ExcitationPolicy:
    def __init__(self, cfg: ExcitationConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.z = np.zeros(2)
        self.v_target = rng.uniform(*cfg.speed_range)

    def __call__(self, state: VehicleState, pose: Pose) -> ControlInput:
        c, rng = self.cfg, self.rng
        a = math.exp(-c.command_dt / c.tau)
        self.z = a * self.z + math.sqrt(1 - a * a) * rng.standard_normal(2)
        if rng.random() < c.command_dt / c.speed_hold:
            self.v_target = rng.uniform(*c.speed_range)
        u1 = c.steer_std * self.z[0]
        dist = math.hypot(pose.X, pose.Y)
        if dist > c.home_radius:
            # steer toward the origin, bounded
            bearing = math.atan2(-pose.Y, -pose.X) - pose.psi
            bearing = math.atan2(math.sin(bearing), math.cos(bearing))
            u1 += 0.8 * np.clip(bearing, -1.0, 1.0) * min(1.0, (dist - c.home_radius) / 2.0)
        u2 = c.accel_std * self.z[1] + c.speed_gain * (self.v_target - state.vx)
        return ControlInput(u1, u2).clamped()


def collect_data(sim_cfg: SimConfig, smap: SurfaceMap, duration: float, rng: np.random.Generator,
                 cfg: ExcitationConfig = ExcitationConfig()) -> list[Trajectory]:
    """Drive the simulator under random excitation; returns observed trajectory segments."""
    segments = []
    if duration <= 0:
        return segments
    hold = int(round(cfg.command_dt / cfg.log_dt))
    n_total = int(round(duration / cfg.log_dt))
    seg_len = int(round(cfg.segment_s / cfg.log_dt))
    done = 0
    while done < n_total:
        n = min(seg_len, n_total - done)
        policy = ExcitationPolicy(cfg, rng)
        sim = SimState(Pose(0.0, 0.0, rng.uniform(-math.pi, math.pi)), VehicleState(0.0, rng.uniform(0.5, 2.0), 0.0, 0.0))
        rec = TrajectoryRecorder()
        ok = True
        cmd = ControlInput()
        for k in range(n):
            s_obs, p_obs = observe(sim, sim_cfg, rng)
            if k % hold == 0:
                cmd = policy(s_obs, p_obs)
            rec.append(round(k * cfg.log_dt, 9), s_obs, p_obs, cmd, surface_at(smap, sim.pose.X, sim.pose.Y)[0])
            try:
                sim = sim_step(sim, sim_cfg, smap, cmd, cfg.log_dt)
            except SimulationDivergence as exc:
                log.warning("dropping segment: %s", exc)
                ok = False
                break
            if max(abs(sim.pose.X), abs(sim.pose.Y)) > cfg.workspace:
                log.warning("dropping segment: left workspace")
                ok = False
                break
        done += n
        if ok:
            segments.append(rec.build())
    return segments


def decimate(traj: Trajectory, target_dt: float = DT) -> Trajectory:
    """Keep every k-th sample so the spacing becomes ``target_dt``.

    The commands on kept rows must already be held for ``target_dt``;
    the ratio of target to source spacing must be an integer.
    """
    if len(traj) < 2:
        return traj
    ratio = target_dt / traj.dt
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9:
        raise ValueError(f"cannot decimate {traj.dt} s samples to {target_dt} s: ratio {ratio:.4g} is not an integer")
    sl = slice(0, None, k)
    return Trajectory(traj.times[sl], traj.states[sl], traj.poses[sl], traj.inputs[sl], list(traj.surfaces[sl]))


def make_windows(trajs, length: int, stride: int) -> list[SampleWindow]:
    out = []
    for tr in trajs:
        for start in range(0, len(tr) - length + 1, stride):
            out.append(tr.window(start, length))
    return out


def _stack(windows):
    return (np.stack([w.states for w in windows]), np.stack([w.poses for w in windows]),
            np.stack([w.inputs for w in windows]), windows[0].dt)


def fit_normalizer(windows) -> nn.Normalizer:
    """Input statistics plus an output scale from finite-difference state derivatives."""
    x = np.concatenate([np.concatenate([w.states, w.inputs], axis=1) for w in windows])
    dx = np.concatenate([np.diff(w.states, axis=0) / w.dt for w in windows])
    return nn.Normalizer.fit(x).with_output_scale(dx)


def evaluate(model: Model, windows) -> float:
    s, p, u, dt = _stack(windows)
    return float(batch_loss_and_grad(model, s, p, u, dt, with_grad=False)[0].mean())


def terminal_position_errors(model: Model, windows) -> np.ndarray:
    """Distance between predicted and measured final position of each window."""
    from .dynamics import rollout_array
    s, p, u, dt = _stack(windows)
    _, poses = rollout_array(model, s[:, 0], p[:, 0], u[:, :-1], dt)
    return np.hypot(poses[:, -1, 0] - p[:, -1, 0], poses[:, -1, 1] - p[:, -1, 1])


def train_offline(windows, cfg: TrainConfig, rng: np.random.Generator, norm: nn.Normalizer | None = None,
                  theta0: np.ndarray | None = None):
    """Adam on the mean rollout loss over shuffled mini-batches.

    Returns ``(model, history)`` where history holds the mean training loss
    before training and after every epoch.
    """
    if not windows:
        raise ValueError("empty dataset")
    norm = norm or fit_normalizer(windows)
    theta = nn.init_params(rng) if theta0 is None else theta0.copy()
    model = Model(theta, norm)
    s_all, p_all, u_all, dt = _stack(windows)
    n = len(windows)
    adam = nn.AdamState.zeros()
    history = [evaluate(model, windows)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            losses, grad = batch_loss_and_grad(model, s_all[idx], p_all[idx], u_all[idx], dt)
            grad /= len(idx)
            gn = np.linalg.norm(grad)
            if not np.isfinite(gn):
                raise DivergenceError(f"non-finite gradient at epoch {epoch}")
            if gn > cfg.grad_clip:
                grad *= cfg.grad_clip / gn
            theta, adam = nn.adam_step(model.theta, grad, adam, cfg.lr)
            model = Model(theta, norm)
        history.append(evaluate(model, windows))
        log.info("epoch %d loss %.5g", epoch + 1, history[-1])
        if not np.isfinite(history[-1]):
            raise DivergenceError(f"non-finite training loss at epoch {epoch + 1}")
    return model, history


def finetune_on_track(model: Model, sim_cfg: SimConfig, costmap, spec, mppi_cfg, laps: int, seed: int = 0,
                      adapt_cfg=None, smap: SurfaceMap | None = None) -> Model:
    """Closed-loop laps on a cement-only oval with gradient-descent adaptation.

    The settled fast parameters become the common starting point of every
    online-adaptation mode.
    """
    from .adaptation import AdaptConfig
    from .runner import run_closed_loop
    from .sim import cement_map

    adapt_cfg = adapt_cfg or AdaptConfig(mode="gd")
    if adapt_cfg.mode != "gd":
        adapt_cfg = replace(adapt_cfg, mode="gd")
    res = run_closed_loop(model, sim_cfg, smap or cement_map(), costmap, spec, mppi_cfg, adapt_cfg, seed,
                          laps=laps, record_events=False)
    if res.failed:
        raise DivergenceError(f"fine-tuning run failed: {res.message}")
    return Model(res.final_params, model.norm)
