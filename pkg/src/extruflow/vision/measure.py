from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

from ..dynamics import WidthProfile

log = logging.getLogger(__name__)


class NoBeadError(ValueError):
    pass


def largest_component(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Largest 8-connected component and the number of components dropped."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        raise NoBeadError("segmentation mask is empty")
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return labels == keep, n - 1


def bead_axis(rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centroid and unit principal/orthogonal axes of mask pixels in (x, y)."""
    pts = np.c_[cols, rows].astype(float)
    centre = pts.mean(axis=0)
    cov = np.cov((pts - centre).T) if len(pts) > 1 else np.eye(2)
    vals, vecs = np.linalg.eigh(cov)
    axis = vecs[:, np.argmax(vals)]
    # orient along +x (or +y for vertical beads) so profiles read left to right
    if axis[0] < -1e-12 or (abs(axis[0]) <= 1e-12 and axis[1] < 0):
        axis = -axis
    normal = np.array([-axis[1], axis[0]])
    return centre, axis, normal


def measure_widths(image, mask: np.ndarray, pixel_scale: float, sample_pitch: float = 0.1,
                   warnings: list | None = None) -> WidthProfile:
    """Bead width every `sample_pitch` mm along its principal axis.

    In each 1-px band across the bead the width is the extent of mask pixels
    along the orthogonal direction plus one pixel (pixel centres span one
    pixel less than the bead). `image` is only used for its shape check.
    """
    mask = np.asarray(mask, dtype=bool)
    if image is not None and hasattr(image, "data") and image.data.shape != mask.shape:
        raise ValueError("mask and image shapes differ")
    if not pixel_scale > 0 or not sample_pitch > 0:
        raise ValueError("pixel scale and sample pitch must be positive")
    if not mask.any():
        raise NoBeadError("segmentation mask is empty")
    warnings = warnings if warnings is not None else []
    bead, dropped = largest_component(mask)
    if dropped:
        warnings.append(f"discarded {dropped} smaller mask components")
        log.info("discarded %d smaller mask components", dropped)
    rows, cols = np.nonzero(bead)
    centre, axis, normal = bead_axis(rows, cols)
    pts = np.c_[cols, rows].astype(float) - centre
    t = pts @ axis
    s = pts @ normal
    extent_t = t.max() - t.min() + 1.0
    extent_s = s.max() - s.min() + 1.0
    if extent_t < 3.0 * extent_s:
        warnings.append(f"bead aspect ratio {extent_t / extent_s:.2f} < 3; orientation may be unreliable")
    pitch_px = sample_pitch / pixel_scale
    stations = np.arange(t.min(), t.max() + 1e-9, pitch_px)
    xs, ws = [], []
    order = np.argsort(t, kind="stable")
    t_sorted, s_sorted = t[order], s[order]
    for t0 in stations:
        lo = np.searchsorted(t_sorted, t0 - 0.5, side="left")
        hi = np.searchsorted(t_sorted, t0 + 0.5, side="right")
        if hi <= lo:
            continue
        band = s_sorted[lo:hi]
        xs.append((t0 - t.min()) * pixel_scale)
        ws.append((band.max() - band.min() + 1.0) * pixel_scale)
    return WidthProfile(np.asarray(xs), np.asarray(ws))
