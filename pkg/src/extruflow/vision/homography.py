"""Plane-to-plane projective maps and perspective rectification."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .image import GrayImage

RMS_WARN_PX = 2.0


class HomographyError(ValueError):
    pass


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray  # maps source (x, y, 1) to destination, h33 = 1
    pixel_scale: float = 1.0  # mm per destination pixel
    rms: float = 0.0  # symmetric reprojection RMS (px)
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise HomographyError("homography must be 3x3")
        if abs(m[2, 2]) < 1e-15:
            raise HomographyError("h33 is zero; cannot normalize")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise HomographyError("homography is singular")
        if not self.pixel_scale > 0:
            raise HomographyError("pixel scale must be positive")
        object.__setattr__(self, "matrix", m)

    def apply(self, pts) -> np.ndarray:
        return project(self.matrix, pts)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix), self.pixel_scale, self.rms, self.warnings)


def project(h: np.ndarray, pts) -> np.ndarray:
    p = np.asarray(pts, dtype=float).reshape(-1, 2)
    q = np.c_[p, np.ones(len(p))] @ np.asarray(h).T
    return q[:, :2] / q[:, 2:3]


def _normalizer(p: np.ndarray) -> np.ndarray:
    c = p.mean(axis=0)
    d = np.mean(np.linalg.norm(p - c, axis=1))
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _collinear(a, b, c, tol) -> bool:
    return abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) <= tol


def _check_degenerate(p: np.ndarray) -> None:
    scale = max(float(np.ptp(p, axis=0).max()), 1e-12)
    tol = 1e-9 * scale * scale
    if len(p) == 4:
        for a, b, c in itertools.combinations(p, 3):
            if _collinear(a, b, c, tol):
                raise HomographyError("three of the four correspondences are collinear")
    centred = p - p.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[-1] <= 1e-9 * sv[0]:
        raise HomographyError("all correspondences are collinear")


def dlt(src, dst) -> np.ndarray:
    """Normalized direct linear transform."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    ts, td = _normalizer(src), _normalizer(dst)
    s = project(ts, src)
    d = project(td, dst)
    rows = []
    for (x, y), (u, v) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if len(sv) >= 8 and sv[7] <= 1e-10 * sv[0]:
        raise HomographyError("correspondences do not determine a unique homography (rank deficient)")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    if abs(h[2, 2]) < 1e-15:
        raise HomographyError("degenerate homography (h33 = 0)")
    return h / h[2, 2]


def symmetric_residuals(h: np.ndarray, src, dst) -> np.ndarray:
    hinv = np.linalg.inv(h)
    fwd = project(h, src) - dst
    bwd = project(hinv, dst) - src
    return np.concatenate([fwd.ravel(), bwd.ravel()])


def estimate_homography(src, dst, pixel_scale: float = 1.0, refine: bool = True) -> Homography:
    """Homography mapping `src` points onto `dst` points (at least four pairs).

    DLT on normalized coordinates, then Gauss-Newton (Levenberg-Marquardt)
    on the symmetric transfer error.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise HomographyError("point lists differ in length")
    if len(src) < 4:
        raise HomographyError("at least four correspondences are needed")
    _check_degenerate(src)
    _check_degenerate(dst)
    h = dlt(src, dst)
    if refine and len(src) > 4:
        def resid(p):
            return symmetric_residuals(np.append(p, 1.0).reshape(3, 3), src, dst)

        r = optimize.least_squares(resid, h.ravel()[:8], method="lm", xtol=1e-14, ftol=1e-14)
        cand = np.append(r.x, 1.0).reshape(3, 3)
        if np.sum(resid(r.x) ** 2) <= np.sum(symmetric_residuals(h, src, dst) ** 2):
            h = cand
    res = symmetric_residuals(h, src, dst).reshape(-1, 2)
    rms = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
    warnings = ()
    if rms > RMS_WARN_PX:
        warnings = (f"reprojection RMS {rms:.3f} px exceeds {RMS_WARN_PX} px",)
    return Homography(h, pixel_scale, rms, warnings)


def board_points(rows: int, cols: int, square: float) -> np.ndarray:
    """Inner-corner coordinates of a board, row-major, origin at the first corner."""
    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows))
    return np.c_[jj.ravel(), ii.ravel()].astype(float) * square


def board_homography(corners_px, rows: int, cols: int, square_mm: float, px_per_mm: float,
                     origin_mm=(0.0, 0.0)) -> Homography:
    """Map image pixels to a top-down frame where board coordinates are scaled by px_per_mm.

    `origin_mm` is the board coordinate that lands on output pixel (0, 0).
    The returned pixel_scale is derived from the mean rectified pitch of
    the detected corners.
    """
    board = board_points(rows, cols, square_mm)
    dst = (board - np.asarray(origin_mm, dtype=float)) * px_per_mm
    h = estimate_homography(corners_px, dst)
    rect = h.apply(corners_px).reshape(rows, cols, 2)
    pitches = []
    if cols > 1:
        pitches.append(np.linalg.norm(np.diff(rect, axis=1), axis=2).ravel())
    if rows > 1:
        pitches.append(np.linalg.norm(np.diff(rect, axis=0), axis=2).ravel())
    pitch = float(np.mean(np.concatenate(pitches)))
    return Homography(h.matrix, square_mm / pitch, h.rms, h.warnings)


def rectify(image: GrayImage, h: Homography, shape: tuple[int, int] | None = None) -> GrayImage:
    """Resample into the destination frame of `h` (bilinear, zero outside the source)."""
    rows, cols = shape if shape is not None else (image.height, image.width)
    yy, xx = np.mgrid[0:rows, 0:cols].astype(float)
    src = project(np.linalg.inv(h.matrix), np.c_[xx.ravel(), yy.ravel()])
    out = ndimage.map_coordinates(image.data, [src[:, 1], src[:, 0]], order=1, mode="constant", cval=0.0)
    return GrayImage(out.reshape(rows, cols))
