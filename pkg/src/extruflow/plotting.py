"""Minimal raster line plots for width-profile overlays (no GUI backend)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .dynamics import WidthProfile

COLORS = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (255, 127, 14), (148, 103, 189), (23, 190, 207)]


@dataclass(frozen=True)
class Axes:
    x0: float
    x1: float
    y0: float
    y1: float

    def contains(self, x, y) -> bool:
        x, y = np.asarray(x), np.asarray(y)
        return bool(np.all((x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)))


def _nice_step(span: float, ticks: int = 5) -> float:
    raw = span / ticks
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 2.5, 5, 10):
        if m * mag >= raw:
            return m * mag
    return 10 * mag


def autoscale(profiles: list[WidthProfile], pad: float = 0.05) -> Axes:
    xs = np.concatenate([p.x for p in profiles])
    ws = np.concatenate([p.w for p in profiles])
    if len(xs) == 0:
        raise ValueError("nothing to plot")
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ws.min()), float(ws.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.05, y1 + 0.05
    dy = (y1 - y0) * pad
    return Axes(x0, x1, y0 - dy, y1 + dy)


def plot_profiles(profiles: list[WidthProfile], labels: list[str] | None = None,
                  size: tuple[int, int] = (800, 400), axes: Axes | None = None) -> tuple[Image.Image, Axes]:
    """Overlay width profiles; returns the image and the data range drawn."""
    if not profiles or any(len(p) == 0 for p in profiles):
        raise ValueError("every profile must contain data")
    labels = labels or [f"profile {i + 1}" for i in range(len(profiles))]
    ax = axes or autoscale(profiles)
    w, h = size
    left, right, top, bottom = 60, 20, 20, 40
    img = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(img)

    def to_px(x, y):
        px = left + (np.asarray(x) - ax.x0) / (ax.x1 - ax.x0) * (w - left - right)
        py = h - bottom - (np.asarray(y) - ax.y0) / (ax.y1 - ax.y0) * (h - top - bottom)
        return px, py

    draw.rectangle([left, top, w - right, h - bottom], outline="black")
    for axis, (lo, hi) in (("x", (ax.x0, ax.x1)), ("y", (ax.y0, ax.y1))):
        step = _nice_step(hi - lo)
        t = math.ceil(lo / step) * step
        while t <= hi + 1e-12:
            if axis == "x":
                px, _ = to_px(t, ax.y0)
                draw.line([(px, h - bottom), (px, h - bottom + 4)], fill="black")
                draw.text((px - 10, h - bottom + 6), f"{t:g}", fill="black")
            else:
                _, py = to_px(ax.x0, t)
                draw.line([(left - 4, py), (left, py)], fill="black")
                draw.text((4, py - 6), f"{t:.3g}", fill="black")
            t += step
    for i, (p, name) in enumerate(zip(profiles, labels)):
        color = COLORS[i % len(COLORS)]
        px, py = to_px(p.x, p.w)
        pts = list(zip(px.tolist(), py.tolist()))
        if len(pts) == 1:
            draw.ellipse([pts[0][0] - 2, pts[0][1] - 2, pts[0][0] + 2, pts[0][1] + 2], fill=color)
        else:
            draw.line(pts, fill=color, width=2)
        draw.text((left + 8, top + 4 + 14 * i), name, fill=color)
    return img, ax
