"""First-order extrusion model and the virtual-printer plant.

Bead width follows the commanded extrusion ratio through a first-order lag
in *space*: ``w' = (alpha * xi - w) / tau`` with ``tau`` in millimetres of
travel, using a slower constant while the bead grows than while it shrinks.
The explicit discretization over a segment of length ``ds`` is

    w[k+1] = (1 - ds/tau) * w[k] + alpha * ds/tau * xi[k]
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corners import CornerModel, span_speeds

SPEED_FLOOR = 0.02  # fraction of cruise speed below which the speed ratio is capped


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class ExtrusionModel:
    alpha: float
    tau_expand: float
    tau_shrink: float
    xi_low: float = 0.03
    xi_high: float = 0.05

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (self.tau_expand > 0 and self.tau_shrink > 0):
            raise ValueError("time constants must be positive")
        if not self.xi_low < self.xi_high:
            raise ValueError("xi_low must be below xi_high")

    def tau(self, direction: str) -> float:
        if direction == "expand":
            return self.tau_expand
        if direction == "shrink":
            return self.tau_shrink
        if direction == "mixed":
            return 0.5 * (self.tau_expand + self.tau_shrink)
        raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class WidthProfile:
    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        if x.shape != w.shape or x.ndim != 1:
            raise ValueError("x and w must be 1-D arrays of equal length")
        if len(x) > 1 and not np.all(np.diff(x) > 0):
            raise ValueError("x must be strictly increasing")
        if np.any(w < 0):
            raise ValueError("widths must be non-negative")

    def __len__(self):
        return len(self.x)

    def window(self, x0: float, x1: float) -> "WidthProfile":
        eps = 1e-9 * max(1.0, abs(x0), abs(x1))  # tolerate accumulated arc-length rounding
        keep = (self.x >= x0 - eps) & (self.x <= x1 + eps)
        return WidthProfile(self.x[keep], self.w[keep])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x_mm", "w_mm"])
        for x, w in zip(self.x, self.w):
            writer.writerow([f"{x:.6f}", f"{w:.6f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "WidthProfile":
        text = Path(source).read_text() if not isinstance(source, str) or "\n" not in source else source
        rows = list(csv.reader(io.StringIO(text)))
        if len(rows) < 2:
            raise ValueError("width profile CSV has no data rows")
        data = np.array([[float(v) for v in r[:2]] for r in rows[1:] if r], dtype=float)
        return cls(data[:, 0], data[:, 1])


@dataclass(frozen=True)
class ControlSequence:
    xi: np.ndarray
    step: float
    lengths: np.ndarray | None = field(default=None)

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        object.__setattr__(self, "xi", xi)
        if not np.all(np.isfinite(xi)):
            raise ValueError("extrusion ratios must be finite")
        if self.lengths is not None:
            lengths = np.asarray(self.lengths, dtype=float)
            if lengths.shape != xi.shape:
                raise ValueError("one length per control is required")
            object.__setattr__(self, "lengths", lengths)

    def __len__(self):
        return len(self.xi)

    @property
    def segment_lengths(self) -> np.ndarray:
        return self.lengths if self.lengths is not None else np.full(len(self.xi), self.step)

    def extrusion(self) -> np.ndarray:
        """Filament length per segment."""
        return self.xi * self.segment_lengths


def steady_width(model: ExtrusionModel, zeta):
    return model.alpha * np.asarray(zeta, dtype=float) if np.ndim(zeta) else model.alpha * zeta


def step_matrices(model: ExtrusionModel, delta_s: float, direction: str = "mixed") -> tuple[float, float]:
    """Scalar (A, B) of the discretized width dynamics over one segment."""
    tau = model.tau(direction)
    if not delta_s < tau:
        raise StabilityError(f"step {delta_s} mm is not below tau = {tau} mm ({direction}); "
                             "the explicit discretization would be unstable")
    if not delta_s > 0:
        raise ValueError("step must be positive")
    return 1.0 - delta_s / tau, model.alpha * delta_s / tau


def _lag(model: ExtrusionModel, drive: np.ndarray, lengths: np.ndarray, w0: float) -> np.ndarray:
    """Iterate the width recursion for a drive sequence given in width units."""
    if np.any(lengths >= min(model.tau_expand, model.tau_shrink)):
        raise StabilityError("segment length must stay below both time constants")
    w = np.empty(len(drive) + 1)
    w[0] = w0
    for k in range(len(drive)):
        tau = model.tau_expand if drive[k] > w[k] else model.tau_shrink
        r = lengths[k] / tau
        w[k + 1] = max(0.0, (1.0 - r) * w[k] + r * drive[k])
    return w


def simulate_plant(model: ExtrusionModel, controls: ControlSequence, w0: float = 0.0) -> WidthProfile:
    """Widths w_0..w_N at arc lengths 0, s_1, ..., s_N for a control sequence."""
    if len(controls) == 0:
        raise ValueError("no controls to simulate")
    lengths = controls.segment_lengths
    w = _lag(model, model.alpha * controls.xi, lengths, w0)
    x = np.concatenate([[0.0], np.cumsum(lengths)])
    return WidthProfile(x, w)


def simulate_corner_plant(ext: ExtrusionModel, corner: CornerModel, controls: ControlSequence,
                          geometry, w0: float = 0.0, order: str = "post") -> WidthProfile:
    """Bead width along a path whose head speed dips to zero at every corner.

    ``order="post"`` (default): the extruder lags the command at cruise
    speed and the deposited width is that lagged flow divided by the actual
    head speed, so a steady command widens the bead by exactly
    ``v_const / v(x)`` near a stop. ``order="pre"`` amplifies the command by
    the speed ratio first and then lags it.
    """
    if len(controls) != geometry.n_segments:
        raise ValueError("controls must match the path segments")
    gain = corner.v_const / np.maximum(span_speeds(geometry, corner), SPEED_FLOOR * corner.v_const)
    lengths = geometry.segment_lengths
    drive = ext.alpha * controls.xi
    if order == "pre":
        w = _lag(ext, drive * gain, lengths, w0)
    elif order == "post":
        # flow state is clamped like the width: retraction empties the
        # nozzle but cannot make flow negative
        flow = _lag(ext, drive, lengths, w0)
        w = np.empty_like(flow)
        w[0] = max(0.0, flow[0])
        w[1:] = np.clip(flow[1:] * gain, 0.0, None)
    else:
        raise ValueError(f"unknown order {order!r}")
    x = np.concatenate([[0.0], np.cumsum(lengths)])
    return WidthProfile(x, w)


def closed_form_step(x, w_minus: float, w_plus: float, tau: float) -> np.ndarray:
    """Continuous first-order step response from w_minus towards w_plus."""
    x = np.asarray(x, dtype=float)
    return w_minus + (w_plus - w_minus) * (1.0 - np.exp(-x / tau))


def rmse(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return math.sqrt(float(np.mean((a - b) ** 2)))
