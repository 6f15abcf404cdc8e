"""Closed-loop driving: simulator plant, MPPI controller and online adaptation on one timeline."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import adaptation as ad
from .dynamics import ControlInput, DivergenceError, Model, Pose, SampleWindow, VehicleState
from .mppi import MppiConfig, mppi_step, stage_cost
from .sim import SimConfig, SimState, SimulationDivergence, SurfaceMap, observe, sim_step, surface_at
from .track import Costmap, TrackSpec, track_cost
from .trajlog import Trajectory, TrajectoryRecorder

log = logging.getLogger(__name__)


@dataclass
class LapRecord:
    lap: int
    lap_time: float
    control_error: float
    boundary_crossings: int
    mean_track_cost: float = 0.0
    mean_speed: float = 0.0


@dataclass
class RunResult:
    trajectory: Trajectory
    laps: list
    stage_costs: np.ndarray
    track_costs: np.ndarray
    telemetry: list
    events: list
    failed: bool = False
    message: str = ""
    final_params: np.ndarray | None = None


class LapCounter:
    """Counts directed crossings of the start line (X = cx on the upper straight, moving +X)."""

    def __init__(self, spec: TrackSpec):
        self.spec = spec
        self.count = 0

    def update(self, prev: Pose, cur: Pose) -> bool:
        s = self.spec
        if cur.Y <= s.cy or abs(cur.X - s.cx) > s.straight_length / 2.0:
            return False
        if prev.X - s.cx < 0.0 <= cur.X - s.cx:
            self.count += 1
            return True
        return False


def start_state(spec: TrackSpec, x_offset: float = 0.1, speed: float = 1.0) -> SimState:
    """Just past the start line on the upper straight, heading clockwise."""
    return SimState(Pose(spec.cx + x_offset, spec.cy + spec.radius, 0.0), VehicleState(0.0, speed, 0.0, 0.0))


def run_closed_loop(model: Model, sim_cfg: SimConfig, smap: SurfaceMap, costmap: Costmap, spec: TrackSpec,
                    mppi_cfg: MppiConfig, adapt_cfg: ad.AdaptConfig, seed: int, *, laps: int | None = None,
                    duration: float | None = None, max_time: float = 300.0, start: SimState | None = None,
                    workspace: float = 6.0, record_events: bool = True) -> RunResult:
    """Drive until ``laps`` start-line crossings or ``duration`` seconds, whichever is given."""
    if laps is None and duration is None:
        raise ValueError("give laps or duration")
    rng = np.random.default_rng([seed, 1])
    obs_rng = np.random.default_rng([seed, 2])
    state = ad.init_state(model, np.random.default_rng([seed, 3]))
    sim = start or start_state(spec)
    dt = mppi_cfg.dt
    seq = np.zeros((mppi_cfg.horizon, 2))
    rec = TrajectoryRecorder()
    counter = LapCounter(spec)
    telemetry, events = [], []
    costs, tcosts = [], []
    lap_records = []
    lap_start_step, lap_boundaries = 0, 0
    pending_boundary = False
    prev_surface = surface_at(smap, sim.pose.X, sim.pose.Y)[0]
    n_steps = int(round((duration if duration is not None else max_time) / dt))
    failed, message = False, ""
    k_update = adapt_cfg.steps_per_update

    for k in range(n_steps):
        s_obs, p_obs = observe(sim, sim_cfg, obs_rng)
        surface = surface_at(smap, sim.pose.X, sim.pose.Y)[0]
        if surface != prev_surface:
            pending_boundary = True
            lap_boundaries += 1
        prev_surface = surface
        try:
            cmd, seq, tel = mppi_step(state.model, s_obs, p_obs, seq, costmap, mppi_cfg, rng)
        except DivergenceError as exc:
            failed, message = True, f"controller diverged at t={sim.t:.2f}: {exc}"
            break
        rec.append(round(k * dt, 9), s_obs, p_obs, cmd, surface)
        tc = track_cost(costmap, p_obs.X, p_obs.Y)
        c = stage_cost(s_obs, p_obs, costmap, mppi_cfg)
        costs.append(c)
        tcosts.append(tc)
        tel.update(t=round(k * dt, 9), u1=cmd.u1, u2=cmd.u2, stage_cost=c)
        telemetry.append(tel)

        if adapt_cfg.mode != "fixed" and (k + 1) % k_update == 0 and len(rec) >= adapt_cfg.n_c:
            win = _tail_window(rec, adapt_cfg.n_c, dt)
            try:
                state = ad.on_sample(state, win, pending_boundary, adapt_cfg, events if record_events else None)
            except DivergenceError as exc:
                failed, message = True, f"adaptation diverged at t={sim.t:.2f}: {exc}"
                break
            pending_boundary = False

        prev_pose = sim.pose
        try:
            sim = sim_step(sim, sim_cfg, smap, cmd, dt)
        except SimulationDivergence as exc:
            failed, message = True, str(exc)
            break
        if counter.update(prev_pose, sim.pose):
            seg = slice(lap_start_step, k + 1)
            lap_costs = np.asarray(costs[seg])
            lap_records.append(LapRecord(
                counter.count, (k + 1 - lap_start_step) * dt, float(lap_costs.sum()), lap_boundaries,
                float(np.mean(tcosts[seg])), float(np.mean([r[1][1] for r in rec._rows[seg]]))))
            lap_start_step, lap_boundaries = k + 1, 0
            if laps is not None and counter.count >= laps:
                break
        if max(abs(sim.pose.X - spec.cx), abs(sim.pose.Y - spec.cy)) > workspace:
            failed, message = True, f"left the workspace at t={sim.t:.2f}"
            break
    else:
        if laps is not None:
            failed, message = True, f"only {counter.count} of {laps} laps within {max_time} s"

    return RunResult(rec.build(), lap_records, np.asarray(costs), np.asarray(tcosts), telemetry, events,
                     failed, message, state.fast)


def _tail_window(rec: TrajectoryRecorder, n: int, dt: float) -> SampleWindow:
    rows = rec._rows[-n:]
    return SampleWindow(np.array([r[1] for r in rows]), np.array([r[2] for r in rows]),
                        np.array([r[3] for r in rows]), dt, float(rows[0][0]))
