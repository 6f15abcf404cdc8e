"""Minimal dependency-free SVG line plots, deterministic to the byte."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = {"fixed": "#d62728", "gd": "#1f77b4", "cmaml": "#2ca02c"}
_FALLBACK = ("#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if not np.isfinite(lo) or not np.isfinite(hi) or hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(t) for t in np.arange(start, hi + 0.5 * step, step)]


def _label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


@dataclass
class Panel:
    title: str
    xlabel: str
    ylabel: str
    series: list = field(default_factory=list)  # (label, x, y, colour)
    bands: list = field(default_factory=list)  # (x0, x1, colour) shaded spans
    equal_aspect: bool = False

    def line(self, label, x, y, colour=None):
        colour = colour or PALETTE.get(label) or _FALLBACK[len(self.series) % len(_FALLBACK)]
        self.series.append((label, np.asarray(x, float), np.asarray(y, float), colour))
        return self


def _bounds(panel: Panel):
    xs = np.concatenate([s[1] for s in panel.series]) if panel.series else np.zeros(1)
    ys = np.concatenate([s[2] for s in panel.series]) if panel.series else np.zeros(1)
    xs, ys = xs[np.isfinite(xs)], ys[np.isfinite(ys)]
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    return x0, x1, y0, y1


def _panel_svg(panel: Panel, ox: float, oy: float, w: float, h: float) -> list[str]:
    ml, mr, mt, mb = 60.0, 10.0, 24.0, 40.0
    pw, ph = w - ml - mr, h - mt - mb
    x0, x1, y0, y1 = _bounds(panel)
    if panel.equal_aspect:
        sx, sy = pw / (x1 - x0), ph / (y1 - y0)
        s = min(sx, sy)
        cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
        x0, x1 = cx - pw / (2 * s), cx + pw / (2 * s)
        y0, y1 = cy - ph / (2 * s), cy + ph / (2 * s)

    def px(x):
        return ox + ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return oy + mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<text x="{_fmt(ox + ml + pw / 2)}" y="{_fmt(oy + 16)}" text-anchor="middle" font-size="13">'
           f"{escape(panel.title)}</text>"]
    for b0, b1, colour in panel.bands:
        a, b = max(b0, x0), min(b1, x1)
        if b > a:
            out.append(f'<rect x="{_fmt(px(a))}" y="{_fmt(oy + mt)}" width="{_fmt(px(b) - px(a))}" '
                       f'height="{_fmt(ph)}" fill="{colour}" fill-opacity="0.15" stroke="none"/>')
    out.append(f'<rect x="{_fmt(ox + ml)}" y="{_fmt(oy + mt)}" width="{_fmt(pw)}" height="{_fmt(ph)}" '
               f'fill="none" stroke="#333"/>')
    for t in _nice_ticks(x0, x1):
        out.append(f'<text x="{_fmt(px(t))}" y="{_fmt(oy + mt + ph + 14)}" text-anchor="middle" font-size="10">'
                   f"{_label(t)}</text>")
    for t in _nice_ticks(y0, y1):
        out.append(f'<text x="{_fmt(ox + ml - 4)}" y="{_fmt(py(t) + 3)}" text-anchor="end" font-size="10">'
                   f"{_label(t)}</text>")
    out.append(f'<text x="{_fmt(ox + ml + pw / 2)}" y="{_fmt(oy + h - 6)}" text-anchor="middle" font-size="11">'
               f"{escape(panel.xlabel)}</text>")
    out.append(f'<text x="{_fmt(ox + 12)}" y="{_fmt(oy + mt + ph / 2)}" text-anchor="middle" font-size="11" '
               f'transform="rotate(-90 {_fmt(ox + 12)} {_fmt(oy + mt + ph / 2)})">{escape(panel.ylabel)}</text>')
    for i, (label, x, y, colour) in enumerate(panel.series):
        ok = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x[ok], y[ok]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.2"/>')
        ly = oy + mt + 12 + 14 * i
        out.append(f'<line x1="{_fmt(ox + ml + pw - 70)}" y1="{_fmt(ly)}" x2="{_fmt(ox + ml + pw - 55)}" '
                   f'y2="{_fmt(ly)}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{_fmt(ox + ml + pw - 50)}" y="{_fmt(ly + 4)}" font-size="10">{escape(label)}</text>')
    return out


def write_svg(path, panels, cols: int = 1, panel_size=(640.0, 300.0)) -> Path:
    """Lay ``panels`` out on a grid and write a standalone SVG file."""
    path = Path(path)
    rows = (len(panels) + cols - 1) // cols
    w, h = panel_size
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(cols * w)}" height="{_fmt(rows * h)}" '
             f'font-family="sans-serif">', f'<rect width="100%" height="100%" fill="white"/>']
    for i, panel in enumerate(panels):
        parts += _panel_svg(panel, (i % cols) * w, (i // cols) * h, w, h)
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path
