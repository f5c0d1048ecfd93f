"""Corner kinematics and the compensated width reference.

The printhead is assumed to cruise at ``v_const`` and to brake/accelerate
uniformly with ``decel`` into and out of every corner, while the extruder is
too slow to follow. The transient zone on each side of a corner is
``d_tr = v_const**2 / (2 * decel)`` long.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class CornerModel:
    v_const: float  # mm/s
    decel: float  # mm/s^2, also used for acceleration

    def __post_init__(self):
        if not (self.v_const > 0 and self.decel > 0):
            raise ValueError("corner model needs positive speed and deceleration")

    @property
    def d_tr(self) -> float:
        return self.v_const**2 / (2.0 * self.decel)

    def speed(self, x, length: float) -> np.ndarray:
        """Trapezoidal speed at arc length x on a line of `length` between stops."""
        x = np.asarray(x, dtype=float)
        d = np.clip(np.minimum(x, length - x), 0.0, None)
        return np.minimum(self.v_const, np.sqrt(2.0 * self.decel * d))


@dataclass(frozen=True)
class WidthReference:
    target: np.ndarray  # desired width per segment
    nominal: float

    def __len__(self):
        return len(self.target)


def decel_width(model: CornerModel, w_nominal: float, x: float) -> float:
    """Over-extruded width at distance x into the braking zone before a corner."""
    if not 0 <= x < model.d_tr:
        raise DomainError(f"x = {x} outside the braking zone [0, {model.d_tr})")
    v = model.v_const
    return v / math.sqrt(v * v - 2.0 * model.decel * x) * w_nominal


def accel_width(model: CornerModel, w_nominal: float, x: float) -> float:
    """Width at distance x after a corner while the head speeds back up."""
    if not 0 < x <= model.d_tr:
        raise DomainError(f"x = {x} outside the acceleration zone (0, {model.d_tr}]")
    return model.v_const / math.sqrt(2.0 * model.decel * x) * w_nominal


def compensated_width(x, length: float, model: CornerModel | None, w_nominal) -> np.ndarray:
    """Five-stage width reference for a line of `length` with stops at both ends.

    Zero for the first and last half bead width, square-root ramps across
    the transient zones, nominal in between. When the line is too short for
    a plateau the two ramps meet at mid-line. ``model=None`` means no speed
    transients (trimming only).
    """
    x = np.asarray(x, dtype=float)
    w_nominal = np.broadcast_to(np.asarray(w_nominal, dtype=float), x.shape)
    half = 0.5 * w_nominal
    if model is None:
        w = w_nominal.copy()
    else:
        v, a, d_tr = model.v_const, model.decel, model.d_tr
        up = np.sqrt(2.0 * a * np.clip(x, 0.0, None)) / v
        down = np.sqrt(np.clip(v * v - 2.0 * a * (x - (length - d_tr)), 0.0, None)) / v
        w = w_nominal * np.minimum(1.0, np.minimum(up, down))
    trimmed = (x <= half) | (x > length - half)
    return np.where(trimmed, 0.0, w)


def build_reference(path, corner: CornerModel | None, w_nominal, ext=None) -> WidthReference:
    """Concatenate per-span compensated references sampled at segment midpoints.

    `w_nominal` is a scalar, one value per line span, or one value per
    segment. `ext` is accepted for interface symmetry; the reference only
    depends on geometry and kinematics.
    """
    spans = path.line_spans
    nom = np.asarray(w_nominal, dtype=float)
    if nom.ndim == 0:
        per_seg = np.full(path.n_segments, float(nom))
    elif len(nom) == path.n_segments and len(nom) != len(spans):
        per_seg = nom
    elif len(nom) == len(spans):
        per_seg = np.empty(path.n_segments)
        for span, w in zip(spans, nom):
            per_seg[span.start:span.end] = w
    else:
        raise ValueError("w_nominal must be a scalar, one value per span or one per segment")
    target = np.empty(path.n_segments)
    for span in spans:
        seg = path.segment_lengths[span.start:span.end]
        edges = np.concatenate([[0.0], np.cumsum(seg)])
        mid = 0.5 * (edges[:-1] + edges[1:])
        target[span.start:span.end] = compensated_width(mid, span.length, corner, per_seg[span.start:span.end])
    return WidthReference(target, float(np.max(per_seg)) if len(per_seg) else 0.0)


def span_speeds(path, corner: CornerModel) -> np.ndarray:
    """Head speed at each segment midpoint (trapezoid between stops)."""
    v = np.empty(path.n_segments)
    for span in path.line_spans:
        seg = path.segment_lengths[span.start:span.end]
        edges = np.concatenate([[0.0], np.cumsum(seg)])
        mid = 0.5 * (edges[:-1] + edges[1:])
        v[span.start:span.end] = corner.speed(mid, span.length)
    return v
