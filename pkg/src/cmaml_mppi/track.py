"""Oval-track cost field: 0 inside the driving band, linear ramp to 1 outside it."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TrackSpec:
    """Oval with straights parallel to the X axis, centred on ``(cx, cy)``.

    Clockwise driving runs along +X on the upper straight (Y = cy + radius).
    """

    straight_length: float = 3.0
    radius: float = 1.0
    half_width: float = 0.25  # zero-cost band half width w0
    ramp_width: float = 0.5  # distance over which cost rises 0 -> 1, w1
    cx: float = 0.0
    cy: float = 0.0
    margin: float = 0.5

    def validate(self):
        if self.radius <= 0 or self.straight_length <= 0 or self.half_width <= 0 or self.ramp_width <= 0:
            raise ValueError(f"degenerate track spec {self}")

    @property
    def length(self) -> float:
        return 2.0 * self.straight_length + 2.0 * np.pi * self.radius


def centerline_distance(spec: TrackSpec, x, y):
    """Analytic distance from (x, y) to the oval centreline (vectorised)."""
    x = np.asarray(x, dtype=float) - spec.cx
    y = np.asarray(y, dtype=float) - spec.cy
    h = spec.straight_length / 2.0
    on_straight = np.abs(x) <= h
    d_straight = np.abs(np.abs(y) - spec.radius)
    dx = np.abs(x) - h
    d_arc = np.abs(np.hypot(dx, y) - spec.radius)
    return np.where(on_straight, d_straight, d_arc)


def cost_from_distance(spec: TrackSpec, d):
    return np.clip((np.asarray(d) - spec.half_width) / spec.ramp_width, 0.0, 1.0)


@dataclass(frozen=True)
class Costmap:
    """Cost samples at cell centres: ``values[i, j]`` is at (x0 + j*res, y0 + i*res)."""

    values: np.ndarray
    resolution: float
    x0: float
    y0: float

    @property
    def shape(self):
        return self.values.shape


def build_oval_costmap(spec: TrackSpec, resolution: float = 0.05) -> Costmap:
    spec.validate()
    if resolution <= 0 or resolution > spec.ramp_width / 4.0:
        raise ValueError("resolution must be positive and resolve the ramp with >= 4 cells")
    reach = spec.radius + spec.half_width + spec.ramp_width + spec.margin
    xmin = spec.cx - spec.straight_length / 2.0 - reach
    ymin = spec.cy - reach
    nx = int(np.ceil((spec.straight_length + 2 * reach) / resolution)) + 1
    ny = int(np.ceil(2 * reach / resolution)) + 1
    xs = xmin + resolution * np.arange(nx)
    ys = ymin + resolution * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys)
    values = cost_from_distance(spec, centerline_distance(spec, gx, gy))
    return Costmap(values, float(resolution), float(xmin), float(ymin))


def track_cost(cm: Costmap, x, y):
    """Bilinear interpolation of the costmap; 1 outside the grid. Vectorised."""
    x = np.asarray(x)
    y = np.asarray(y)
    ny, nx = cm.values.shape
    fx = (x - cm.x0) * (1.0 / cm.resolution)
    fy = (y - cm.y0) * (1.0 / cm.resolution)
    with np.errstate(invalid="ignore"):
        inside = (fx >= 0) & (fx <= nx - 1) & (fy >= 0) & (fy <= ny - 1)
    fx = np.clip(np.nan_to_num(fx), 0, nx - 1)
    fy = np.clip(np.nan_to_num(fy), 0, ny - 1)
    j = np.minimum(fx.astype(np.intp), nx - 2)
    i = np.minimum(fy.astype(np.intp), ny - 2)
    tx = fx - j
    ty = fy - i
    flat = cm.values.ravel()
    k = i * nx + j
    v00, v01 = flat[k], flat[k + 1]
    v10, v11 = flat[k + nx], flat[k + nx + 1]
    top = v00 + (v01 - v00) * tx
    bot = v10 + (v11 - v10) * tx
    c = top + (bot - top) * ty
    out = np.where(inside, c, 1.0)
    return float(out) if out.ndim == 0 else out


def export_costmap(cm: Costmap, stem) -> tuple[Path, Path]:
    """Write an 8-bit PGM (white = 0 cost, black = 1) plus a JSON metadata sidecar."""
    stem = Path(stem)
    img = np.round(255 * (1.0 - cm.values[::-1])).astype(np.uint8)  # top row = max Y
    pgm = stem.with_suffix(".pgm")
    with open(pgm, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    meta = stem.with_suffix(".json")
    meta.write_text(json.dumps(
        {"resolution": cm.resolution, "origin": [cm.x0, cm.y0], "shape": list(cm.shape),
         "image": pgm.name, "row_order": "top row is max Y"}, indent=2))
    return pgm, meta
