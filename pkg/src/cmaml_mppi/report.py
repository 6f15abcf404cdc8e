"""Experiment outputs: deterministic JSON summaries, CSV tables and series, SVG figures.

Layout under an output directory::

    inference/summary.json       per-seed cumulative losses, per-surface losses, peak correlation
    inference/table.csv          seeds x modes cumulative mean N_c-step loss
    inference/loss_seed<S>.csv   time, surface, one loss column per mode
    inference/events_<mode>_seed<S>.csv
    inference/loss_seed<S>.svg   loss against time, rubber intervals shaded
    control/summary.json         per-seed lap statistics and corner excursions
    control/table.csv            seeds x modes mean control error, plus mean and min rows
    control/laps_<mode>_seed<S>.csv, telemetry_<mode>_seed<S>.csv, events_<mode>_seed<S>.csv
    control/traj_<mode>_seed<S>.csv (trajectory-log schema)
    control/trajectories_seed<S>.svg, control/speed_seed<S>.svg

Tables and figures are rendered from the JSON and CSV files alone, so
``render_report`` can rebuild them without re-running anything.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .sim import RUBBER
from .svgplot import Panel, write_svg
from .track import TrackSpec
from .trajlog import read_csv, write_csv

MODES = ("fixed", "gd", "cmaml")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def _write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _read_rows(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, list(r)


# ---------------------------------------------------------------- raw outputs


def write_replays(outdir, seed: int, replays: dict) -> None:
    outdir = Path(outdir) / "inference"
    modes = [m for m in MODES if m in replays]
    first = replays[modes[0]]
    rows = zip(first.times, first.surfaces, *[replays[m].losses for m in modes])
    _write_rows(outdir / f"loss_seed{seed}.csv", ["time", "surface", *modes], rows)
    for m in modes:
        write_events(outdir / f"events_{m}_seed{seed}.csv", replays[m].events)


def write_events(path, events) -> Path:
    return _write_rows(path, ["time", "mode", "event", "loss_before", "loss_after", "grad_norm"],
                       [(e.time, e.mode, e.event, e.loss_before, e.loss_after, e.grad_norm) for e in events])


def write_control_run(outdir, mode: str, seed: int, run) -> None:
    outdir = Path(outdir) / "control"
    outdir.mkdir(parents=True, exist_ok=True)
    _write_rows(outdir / f"laps_{mode}_seed{seed}.csv", list(asdict(run.laps[0]).keys()) if run.laps else ["lap"],
                [tuple(asdict(l).values()) for l in run.laps])
    keys = ["t", "u1", "u2", "stage_cost", "cost_min", "cost_mean", "ess"]
    _write_rows(outdir / f"telemetry_{mode}_seed{seed}.csv", keys, [[tel[k] for k in keys] for tel in run.telemetry])
    write_events(outdir / f"events_{mode}_seed{seed}.csv", run.events)
    write_csv(run.trajectory, outdir / f"traj_{mode}_seed{seed}.csv")


# ---------------------------------------------------------------- tables


def inference_table(summary) -> tuple[list, list]:
    seeds = sorted(summary["seeds"], key=int)
    modes = [m for m in MODES if m in summary["seeds"][seeds[0]]]
    rows = [[s] + [summary["seeds"][s][m]["cumulative_mean_loss"] for m in modes] for s in seeds]
    rows.append(["mean"] + [summary["mean_over_seeds"][m] for m in modes])
    return ["seed", *modes], rows


def control_table(summary) -> tuple[list, list]:
    seeds = sorted(summary["seeds"], key=int)
    modes = [m for m in MODES if m in summary["seeds"][seeds[0]]]
    rows = [[s] + [summary["seeds"][s][m]["mean_control_error"] for m in modes] for s in seeds]
    rows.append(["mean"] + [summary["overall"][m]["mean"] for m in modes])
    rows.append(["min"] + [summary["overall"][m]["min"] for m in modes])
    return ["seed", *modes], rows


# ---------------------------------------------------------------- figures


def _surface_bands(times, surfaces, target=RUBBER, colour="#ff7f0e"):
    bands, start = [], None
    for t, s in zip(times, surfaces):
        if s == target and start is None:
            start = t
        elif s != target and start is not None:
            bands.append((start, t, colour))
            start = None
    if start is not None:
        bands.append((start, times[-1], colour))
    return bands


def inference_figure(csv_path, svg_path, window_s: float = 20.0):
    header, rows = _read_rows(csv_path)
    t = np.array([float(r[0]) for r in rows])
    surfaces = [r[1] for r in rows]
    sel = t >= t[-1] - window_s
    panel = Panel(f"N_c-step inference loss, last {window_s:g} s (rubber shaded)", "time (s)", "loss")
    panel.bands = _surface_bands(t[sel], [s for s, k in zip(surfaces, sel) if k])
    for j, mode in enumerate(header[2:]):
        panel.line(mode, t[sel], [float(r[2 + j]) for r, k in zip(rows, sel) if k])
    return write_svg(svg_path, [panel])


def _track_outline(spec: TrackSpec, n: int = 200):
    h, r = spec.straight_length / 2.0, spec.radius
    a = np.linspace(-np.pi / 2, np.pi / 2, n)
    right = np.column_stack([spec.cx + h + r * np.cos(a[::-1]), spec.cy + r * np.sin(a[::-1])])
    left = np.column_stack([spec.cx - h - r * np.cos(a), spec.cy + r * np.sin(a)])
    pts = np.vstack([left[-1:], right, left, right[:1]])
    return pts[:, 0], pts[:, 1]


def control_figures(outdir, seed: int, spec: TrackSpec, modes, laps_shown: int = 10):
    outdir = Path(outdir) / "control"
    traj_panels, speed = [], Panel(f"speed, seed {seed}", "time (s)", "vx (m/s)")
    for mode in modes:
        path = outdir / f"traj_{mode}_seed{seed}.csv"
        if not path.exists():
            continue
        tr = read_csv(path)
        _, lap_rows = _read_rows(outdir / f"laps_{mode}_seed{seed}.csv")
        t_end = sum(float(r[1]) for r in lap_rows[:laps_shown]) if lap_rows else tr.times[-1]
        sel = tr.times <= t_end
        p = Panel(f"{mode}: first {laps_shown} laps, seed {seed}", "X (m)", "Y (m)", equal_aspect=True)
        ox, oy = _track_outline(spec)
        p.line("centreline", ox, oy, "#999999")
        p.line(mode, tr.poses[sel, 0], tr.poses[sel, 1])
        traj_panels.append(p)
        speed.line(mode, tr.times[sel], tr.states[sel, 1])
    if not traj_panels:
        return []
    return [write_svg(outdir / f"trajectories_seed{seed}.svg", traj_panels, cols=len(traj_panels),
                      panel_size=(420.0, 300.0)),
            write_svg(outdir / f"speed_seed{seed}.svg", [speed])]


# ---------------------------------------------------------------- rendering


def render_report(outdir, spec: TrackSpec = TrackSpec()) -> list[Path]:
    """Rebuild every table and figure from the summaries and series on disk."""
    outdir = Path(outdir)
    written = []
    inf = outdir / "inference" / "summary.json"
    if inf.exists():
        summary = read_json(inf)
        header, rows = inference_table(summary)
        written.append(_write_rows(outdir / "inference" / "table.csv", header, rows))
        for seed in sorted(summary["seeds"], key=int):
            src = outdir / "inference" / f"loss_seed{seed}.csv"
            if src.exists():
                written.append(inference_figure(src, outdir / "inference" / f"loss_seed{seed}.svg"))
    ctl = outdir / "control" / "summary.json"
    if ctl.exists():
        summary = read_json(ctl)
        header, rows = control_table(summary)
        written.append(_write_rows(outdir / "control" / "table.csv", header, rows))
        seeds = sorted(summary["seeds"], key=int)
        modes = [m for m in MODES if m in summary["seeds"][seeds[0]]]
        written.extend(control_figures(outdir, int(seeds[0]), spec, modes))
    if not written:
        raise FileNotFoundError(f"no experiment summaries under {outdir}")
    return written
