"""Trajectory log container and its CSV schema.

Columns, in order::

    time, phi, vx, vy, r, X, Y, psi, u1, u2, surface

``u1``/``u2`` on a row are the commands applied from that row's time until
the next row. ``surface`` is the ground-truth surface id under the car.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import SampleWindow

COLUMNS = ("time", "phi", "vx", "vy", "r", "X", "Y", "psi", "u1", "u2", "surface")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    poses: np.ndarray
    inputs: np.ndarray
    surfaces: list = field(default_factory=list)

    def __len__(self):
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(np.round(self.times[1] - self.times[0], 9)) if len(self) > 1 else 0.0

    def window(self, start: int, length: int) -> SampleWindow:
        sl = slice(start, start + length)
        return SampleWindow(self.states[sl], self.poses[sl], self.inputs[sl], self.dt, float(self.times[start]))

    def slice(self, start: int, stop: int) -> "Trajectory":
        sl = slice(start, stop)
        return Trajectory(self.times[sl], self.states[sl], self.poses[sl], self.inputs[sl], list(self.surfaces[sl]))

    @classmethod
    def empty(cls) -> "Trajectory":
        return cls(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 2)), [])


class TrajectoryRecorder:
    """Append-only builder used while running the simulator."""

    def __init__(self):
        self._rows = []

    def append(self, t, state, pose, command, surface):
        self._rows.append((t, state.as_array(), pose.as_array(), command.as_array(), surface))

    def __len__(self):
        return len(self._rows)

    def build(self) -> Trajectory:
        if not self._rows:
            return Trajectory.empty()
        t, s, p, u, surf = zip(*self._rows)
        return Trajectory(np.array(t), np.array(s), np.array(p), np.array(u), list(surf))


def write_csv(traj: Trajectory, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for k in range(len(traj)):
            row = [traj.times[k], *traj.states[k], *traj.poses[k], *traj.inputs[k]]
            w.writerow([repr(float(v)) for v in row] + [traj.surfaces[k]])
    return path


def read_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        rows = list(r)
    if not rows:
        return Trajectory.empty()
    num = np.array([[float(v) for v in row[:10]] for row in rows])
    return Trajectory(num[:, 0], num[:, 1:5], num[:, 5:8], num[:, 8:10], [row[10] for row in rows])
