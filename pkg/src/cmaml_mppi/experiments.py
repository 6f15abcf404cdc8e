"""Seeded experiment drivers: drive-log recording, inference replay, control laps, re-adaptation.

Every function here is a pure function of (config, checkpoint, seeds): all
randomness comes from generators seeded with those values, and nothing
time- or host-dependent enters the returned summaries.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import adaptation as ad
from .config import ExperimentConfig
from .dynamics import ControlInput, Model, Pose, VehicleState, batch_loss_and_grad
from .replay import ReplayResult, replay
from .runner import RunResult, run_closed_loop
from .sim import FOAM, RUBBER, Region, SimState, SurfaceMap, observe, sim_step
from .track import TrackSpec, build_oval_costmap
from .trajlog import Trajectory, TrajectoryRecorder

log = logging.getLogger(__name__)


def costmap_for(cfg: ExperimentConfig):
    return build_oval_costmap(cfg.track, cfg.costmap_resolution)


# ---------------------------------------------------------------- inference


def record_log(cfg: ExperimentConfig, model: Model, seed: int) -> RunResult:
    """Closed-loop drive with the fixed model on the two-mat track for the inference window."""
    run = run_closed_loop(model, cfg.sim, cfg.surfaces.two_mat(), costmap_for(cfg), cfg.track, cfg.mppi,
                          replace(cfg.adapt, mode="fixed"), seed, duration=cfg.experiment.inference_duration,
                          record_events=False)
    if run.failed:
        log.warning("drive log for seed %d ended early: %s", seed, run.message)
    return run


def rubber_cornering_indicator(traj: Trajectory) -> np.ndarray:
    """|lateral acceleration| on rubber, zero elsewhere; a_y approximated by vx * r."""
    ay = np.abs(traj.states[:, 1] * traj.states[:, 3])
    return ay * (np.asarray(traj.surfaces, dtype=object) == RUBBER)


def inference_summary(traj: Trajectory, results: dict[str, ReplayResult], n_c: int) -> dict:
    indicator = rubber_cornering_indicator(traj)[n_c - 1:]
    out = {}
    for mode, r in results.items():
        surf = np.asarray(r.surfaces, dtype=object)
        per_surface = {s: float(r.losses[surf == s].mean()) for s in sorted(set(r.surfaces))}
        corr = float(np.corrcoef(r.losses, indicator)[0, 1]) if np.std(indicator) > 0 else 0.0
        out[mode] = {
            "cumulative_mean_loss": r.cumulative_mean,
            "per_surface_mean_loss": per_surface,
            "rubber_cornering_correlation": corr,
            "n_scored": int(len(r.losses)),
            "n_updates": int(r.n_updates),
        }
    return out


def run_inference(cfg: ExperimentConfig, model: Model, logs: dict[int, Trajectory]):
    """Replay each seed's log through every configured mode.

    Returns ``(summary, replays)`` with ``replays[seed][mode]`` the full series.
    """
    modes = cfg.experiment.modes
    summary, replays = {"seeds": {}}, {}
    for seed in sorted(logs):
        traj = logs[seed]
        res = {m: replay(model, traj, replace(cfg.adapt, mode=m), seed) for m in modes}
        replays[seed] = res
        summary["seeds"][str(seed)] = inference_summary(traj, res, cfg.adapt.n_c)
    summary["mean_over_seeds"] = {
        m: float(np.mean([summary["seeds"][str(s)][m]["cumulative_mean_loss"] for s in sorted(logs)])) for m in modes
    }
    summary["ordering_holds_every_seed"] = _ordering_every_seed(summary, "cumulative_mean_loss")
    return summary, replays


def _ordering_every_seed(summary, key):
    ok = True
    for per_mode in summary["seeds"].values():
        if not all(m in per_mode for m in ("fixed", "gd", "cmaml")):
            return None
        ok &= per_mode["cmaml"][key] < per_mode["gd"][key] < per_mode["fixed"][key]
    return bool(ok)


# ---------------------------------------------------------------- control


def corner_metrics(run: RunResult, spec: TrackSpec, start_step: int = 0) -> dict:
    """Mean track cost in each corner, split into inside/outside excursions."""
    tr = run.trajectory
    x = tr.poses[start_step:, 0] - spec.cx
    y = tr.poses[start_step:, 1] - spec.cy
    tc = run.track_costs[start_step:]
    h = spec.straight_length / 2.0
    out = {}
    for name, side in (("rubber_corner", 1.0), ("foam_corner", -1.0)):
        in_corner = side * x > h
        radial = np.hypot(x - side * h, y)
        inside = in_corner & (radial < spec.radius)
        out[name] = {
            "mean_track_cost": float(tc[in_corner].mean()) if in_corner.any() else 0.0,
            "inside_excursion_cost": float(tc[inside].sum() / max(in_corner.sum(), 1)),
        }
    return out


def control_run_summary(run: RunResult, cfg: ExperimentConfig) -> dict:
    first = cfg.experiment.first_scored_lap
    scored = [lap for lap in run.laps if lap.lap >= first]
    start_step = int(round(sum(l.lap_time for l in run.laps[:first - 1]) / cfg.mppi.dt))
    v = run.trajectory.states[start_step:, 1]
    surf = np.asarray(run.trajectory.surfaces[start_step:], dtype=object)
    return {
        "failed": bool(run.failed),
        "message": run.message,
        "laps_completed": len(run.laps),
        "mean_control_error": float(np.mean([l.control_error for l in scored])) if scored else None,
        "mean_lap_time": float(np.mean([l.lap_time for l in scored])) if scored else None,
        "mean_speed": {s: float(v[surf == s].mean()) for s in (RUBBER, FOAM) if (surf == s).any()},
        "corners": corner_metrics(run, cfg.track, start_step),
    }


def run_control(cfg: ExperimentConfig, model: Model, seeds=None, modes=None, on_run=None):
    """Closed-loop laps for every (mode, seed). ``on_run(mode, seed, run)`` sees each raw result."""
    seeds = cfg.experiment.seeds if seeds is None else seeds
    modes = cfg.experiment.modes if modes is None else modes
    cm = costmap_for(cfg)
    smap = cfg.surfaces.two_mat()
    summary = {"seeds": {}}
    for seed in seeds:
        per_mode = {}
        for mode in modes:
            run = run_closed_loop(model, cfg.sim, smap, cm, cfg.track, cfg.mppi, replace(cfg.adapt, mode=mode), seed,
                                  laps=cfg.experiment.laps, max_time=cfg.experiment.max_time)
            if run.failed:
                log.warning("control run %s/%d failed: %s", mode, seed, run.message)
            per_mode[mode] = control_run_summary(run, cfg)
            if on_run is not None:
                on_run(mode, seed, run)
        summary["seeds"][str(seed)] = per_mode
    means = {}
    for mode in modes:
        vals = [summary["seeds"][str(s)][mode]["mean_control_error"] for s in seeds]
        vals = [v for v in vals if v is not None]
        means[mode] = {"mean": float(np.mean(vals)) if vals else None, "min": float(np.min(vals)) if vals else None,
                       "failed_runs": sum(summary["seeds"][str(s)][mode]["failed"] for s in seeds)}
    summary["overall"] = means
    if all(m in means and means[m]["mean"] is not None for m in ("fixed", "gd", "cmaml")):
        f, g, c = (means[m]["mean"] for m in ("fixed", "gd", "cmaml"))
        summary["ordering_holds"] = bool(c < g < f)
        summary["cmaml_gain_over_fixed"] = float(1.0 - c / f)
    return summary


# ---------------------------------------------------------------- re-adaptation


@dataclass(frozen=True)
class ReadaptConfig:
    surface_a: str = RUBBER
    surface_b: str = FOAM
    visit_s: float = 10.0
    holdout_s: float = 10.0
    target_speed: float = 2.2
    lookahead: float = 0.6
    threshold_fraction: float = 0.5  # fraction of the first-visit gd improvement required
    early_updates: int = 10


def _uniform_map(cfg: ExperimentConfig, surface: str) -> SurfaceMap:
    s = cfg.surfaces
    mu, scale = {RUBBER: (s.mu_rubber, s.stiffness_rubber), FOAM: (s.mu_foam, s.stiffness_foam)}[surface]
    return SurfaceMap((Region(surface, mu, stiffness_scale=scale),), surface, mu)


def pure_pursuit(spec: TrackSpec, pose: Pose, state: VehicleState, target_speed: float, lookahead: float,
                 wheelbase: float, max_steer: float, max_accel: float) -> ControlInput:
    """Geometric path follower for the clockwise oval; returns normalised commands."""
    x, y = pose.X - spec.cx, pose.Y - spec.cy
    h, r = spec.straight_length / 2.0, spec.radius
    # arc length of the nearest centreline point, clockwise from the top-left corner
    if abs(x) <= h:
        s = (x + h) if y > 0 else (2 * h + math.pi * r + (h - x))
    elif x > h:
        s = 2 * h + (math.pi / 2 - math.atan2(y, x - h)) * r
    else:
        s = 4 * h + math.pi * r + ((-math.pi / 2 - math.atan2(y, x + h)) % (2 * math.pi)) * r
    total = 4 * h + 2 * math.pi * r
    tx, ty = _oval_point(spec, (s + lookahead) % total)
    dx, dy = tx - pose.X, ty - pose.Y
    alpha = math.atan2(dy, dx) - pose.psi
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    delta = math.atan2(2.0 * wheelbase * math.sin(alpha), lookahead)
    u1 = delta / max_steer
    u2 = 4.0 * (target_speed - state.vx) / max_accel
    return ControlInput(u1, u2).clamped()


def _oval_point(spec: TrackSpec, s: float):
    h, r = spec.straight_length / 2.0, spec.radius
    if s < 2 * h:
        return spec.cx - h + s, spec.cy + r
    s -= 2 * h
    if s < math.pi * r:
        a = math.pi / 2 - s / r
        return spec.cx + h + r * math.cos(a), spec.cy + r * math.sin(a)
    s -= math.pi * r
    if s < 2 * h:
        return spec.cx + h - s, spec.cy - r
    s -= 2 * h
    a = -math.pi / 2 - s / r
    return spec.cx - h + r * math.cos(a), spec.cy + r * math.sin(a)


def scripted_drive(cfg: ExperimentConfig, schedule, seed: int, rc: ReadaptConfig = ReadaptConfig()) -> Trajectory:
    """Pure-pursuit laps with the surface switched by time: ``schedule`` is [(surface, seconds), ...]."""
    rng = np.random.default_rng([seed, 4])
    spec, sc, dt = cfg.track, cfg.sim, cfg.mppi.dt
    sim = SimState(Pose(spec.cx, spec.cy + spec.radius, 0.0), VehicleState(0.0, rc.target_speed, 0.0, 0.0))
    rec = TrajectoryRecorder()
    k = 0
    for surface, seconds in schedule:
        smap = _uniform_map(cfg, surface)
        for _ in range(int(round(seconds / dt))):
            s_obs, p_obs = observe(sim, sc, rng)
            cmd = pure_pursuit(spec, p_obs, s_obs, rc.target_speed, rc.lookahead, sc.a + sc.b, sc.max_steer,
                               sc.max_accel)
            rec.append(round(k * dt, 9), s_obs, p_obs, cmd, surface)
            sim = sim_step(sim, sc, smap, cmd, dt)
            k += 1
    return rec.build()


def _heldout_loss(model: Model, windows) -> float:
    s, p, u = (np.stack(x) for x in zip(*[(w.states, w.poses, w.inputs) for w in windows]))
    return float(batch_loss_and_grad(model, s, p, u, windows[0].dt, with_grad=False)[0].mean())


def readaptation_trace(model: Model, stream: Trajectory, heldout, cfg: ad.AdaptConfig, seed: int):
    """Held-out task-A loss after every update along ``stream``; returns (losses, surfaces at update)."""
    state = ad.init_state(model, np.random.default_rng([seed, 3]))
    n_c, k_up = cfg.n_c, cfg.steps_per_update
    surfaces = stream.surfaces
    losses, at = [_heldout_loss(model, heldout)], [surfaces[0]]
    pending = False
    for k in range(1, len(stream)):
        pending = pending or surfaces[k] != surfaces[k - 1]
        if (k + 1) % k_up or k + 1 < n_c:
            continue
        state = ad.on_sample(state, stream.window(k + 1 - n_c, n_c), pending, cfg)
        pending = False
        losses.append(_heldout_loss(state.model, heldout))
        at.append(surfaces[k])
    return np.asarray(losses), at


def _visits(at):
    """Index ranges of consecutive equal surfaces in the update trace."""
    out, start = [], 0
    for i in range(1, len(at) + 1):
        if i == len(at) or at[i] != at[start]:
            out.append((at[start], start, i))
            start = i
    return out


def updates_to_threshold(losses, lo, hi, threshold) -> int:
    """Updates into the visit [lo, hi) until the held-out loss is at or below ``threshold``."""
    for j in range(lo, hi):
        if losses[j] <= threshold:
            return j - lo
    return hi - lo


def run_readaptation(cfg: ExperimentConfig, model: Model, seeds, rc: ReadaptConfig = ReadaptConfig()) -> dict:
    """A -> B -> A stream per seed; counts updates to reach a task-A loss threshold."""
    out = {"seeds": {}}
    schedule = [(rc.surface_a, rc.visit_s), (rc.surface_b, rc.visit_s), (rc.surface_a, rc.visit_s)]
    for seed in seeds:
        stream = scripted_drive(cfg, schedule, seed, rc)
        hold = scripted_drive(cfg, [(rc.surface_a, rc.holdout_s)], seed + 10_000, rc)
        n_c = cfg.adapt.n_c
        heldout = [hold.window(i, n_c) for i in range(0, len(hold) - n_c + 1, n_c)]
        traces = {m: readaptation_trace(model, stream, heldout, replace(cfg.adapt, mode=m), seed)
                  for m in ("gd", "cmaml")}
        visits = _visits(traces["gd"][1])
        a1 = next(v for v in visits if v[0] == rc.surface_a)
        a2 = [v for v in visits if v[0] == rc.surface_a][-1]
        l_gd = traces["gd"][0]
        l0, l1 = l_gd[0], l_gd[a1[2] - 1]
        threshold = l1 + (1.0 - rc.threshold_fraction) * (l0 - l1)
        per = {"threshold": float(threshold), "initial_loss": float(l0)}
        for mode, (losses, _) in traces.items():
            per[mode] = {
                "first_visit_updates": updates_to_threshold(losses, a1[1], a1[2], threshold),
                "second_visit_updates": updates_to_threshold(losses, a2[1], a2[2], threshold),
                "second_visit_start_loss": float(losses[a2[1]]),
                # supplementary: mean held-out loss over the first updates back on A
                "second_visit_early_mean_loss": float(np.mean(losses[a2[1]:a2[1] + rc.early_updates])),
            }
        out["seeds"][str(seed)] = per
    for mode in ("gd", "cmaml"):
        out[f"{mode}_mean_second_visit_updates"] = float(np.mean([v[mode]["second_visit_updates"]
                                                                 for v in out["seeds"].values()]))
    for mode in ("gd", "cmaml"):
        out[f"{mode}_mean_second_visit_early_loss"] = float(np.mean([v[mode]["second_visit_early_mean_loss"]
                                                                    for v in out["seeds"].values()]))
    out["cmaml_not_slower"] = bool(out["cmaml_mean_second_visit_updates"] <= out["gd_mean_second_visit_updates"])
    return out
