"""Checkerboard inner-corner detection.

Inner corners are saddle points of the (smoothed) intensity surface, so the
negative Hessian determinant peaks there while edges, blobs and the board's
outer L-junctions respond much more weakly. Peaks are ordered into a grid
through the quadrilateral spanned by the extreme detections.
"""

from __future__ import annotations

import csv
import itertools

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .homography import HomographyError, board_points, estimate_homography, project
from .image import GrayImage


class DetectionError(ValueError):
    pass


def saddle_response(data: np.ndarray, sigma: float) -> np.ndarray:
    ixx = ndimage.gaussian_filter(data, sigma, order=(0, 2))
    iyy = ndimage.gaussian_filter(data, sigma, order=(2, 0))
    ixy = ndimage.gaussian_filter(data, sigma, order=(1, 1))
    return ixy * ixy - ixx * iyy


def _subpixel(resp: np.ndarray, r: int, c: int) -> tuple[float, float]:
    """Peak of a quadratic fitted to the 3x3 neighbourhood."""
    h, w = resp.shape
    if not (1 <= r < h - 1 and 1 <= c < w - 1):
        return float(c), float(r)
    patch = resp[r - 1:r + 2, c - 1:c + 2]
    yy, xx = np.mgrid[-1:2, -1:2]
    a = np.c_[xx.ravel() ** 2, yy.ravel() ** 2, xx.ravel() * yy.ravel(), xx.ravel(), yy.ravel(),
              np.ones(9)]
    k = np.linalg.lstsq(a, patch.ravel(), rcond=None)[0]
    hess = np.array([[2 * k[0], k[2]], [k[2], 2 * k[1]]])
    try:
        off = -np.linalg.solve(hess, k[3:5])
    except np.linalg.LinAlgError:
        return float(c), float(r)
    if np.any(np.abs(off) > 1.0):
        return float(c), float(r)
    return float(c + off[0]), float(r + off[1])


def _peaks(resp: np.ndarray, radius: int, rel: float) -> np.ndarray:
    top = float(resp.max())
    if not top > 0:
        return np.empty((0, 3))
    local = ndimage.maximum_filter(resp, size=2 * radius + 1, mode="nearest")
    rr, cc = np.nonzero((resp == local) & (resp > rel * top))
    order = np.argsort(-resp[rr, cc], kind="stable")
    return np.c_[cc[order], rr[order], resp[rr, cc][order]]


def _outer_quad(pts: np.ndarray) -> np.ndarray:
    """Four detections spanning the largest quadrilateral, clockwise from top-left."""
    try:
        hull = pts[ConvexHull(pts).vertices]
    except QhullError as exc:
        raise DetectionError("corner candidates are degenerate (collinear)") from exc
    best, best_area = None, -1.0
    for quad in itertools.combinations(range(len(hull)), 4):
        q = hull[list(quad)]
        area = 0.5 * abs(np.dot(q[:, 0], np.roll(q[:, 1], -1)) - np.dot(q[:, 1], np.roll(q[:, 0], -1)))
        if area > best_area:
            best, best_area = q, area
    # hull order is counter-clockwise in (x, y); with y pointing down that is clockwise on screen
    start = int(np.argmin(best[:, 0] + best[:, 1]))
    return np.roll(best, -start, axis=0)


def _assign(pts: np.ndarray, quad: np.ndarray, rows: int, cols: int):
    """Match detections to grid nodes through the quad; returns ordered points or None."""
    best = None
    ideal = board_points(rows, cols, 1.0)
    corners = np.array([[0, 0], [cols - 1, 0], [cols - 1, rows - 1], [0, rows - 1]], float)
    # try both handednesses: the quad's second vertex along the column axis or the row axis
    for q in (quad, np.roll(quad[::-1], 1, axis=0)):
        try:
            h = estimate_homography(corners, q, refine=False)
        except HomographyError:
            continue
        pred = project(h.matrix, ideal)
        d = np.linalg.norm(pred[:, None, :] - pts[None, :, :], axis=2)
        idx = np.argmin(d, axis=1)
        if len(set(idx.tolist())) != len(idx):
            continue
        pitch = np.median(np.linalg.norm(np.diff(pred.reshape(rows, cols, 2), axis=1), axis=2)) if cols > 1 \
            else np.median(np.linalg.norm(np.diff(pred.reshape(rows, cols, 2), axis=0), axis=2))
        err = d[np.arange(len(idx)), idx]
        if np.max(err) > 0.35 * pitch:
            continue
        score = float(np.mean(err))
        if best is None or score < best[0]:
            best = (score, pts[idx])
    return None if best is None else best[1]


def detect_checkerboard(image: GrayImage, rows: int, cols: int, sigma: float | None = None,
                        rel_threshold: float = 0.35) -> np.ndarray:
    """Inner corners of a rows x cols board as a (rows*cols, 2) array of (x, y) pixels.

    Corners are ordered row-major starting from the one nearest the image's
    top-left, first along the board direction closest to the image x axis.
    """
    if rows < 2 or cols < 2:
        raise DetectionError("board needs at least 2x2 inner corners")
    n = rows * cols
    data = image.data
    if float(np.ptp(data)) < 1e-6:
        raise DetectionError("image is blank; supply an external corner file instead")
    sigmas = [sigma] if sigma is not None else [1.5, 2.5, 4.0]
    last = "no saddle points found"
    for s in sigmas:
        resp = saddle_response(data, s)
        cand = _peaks(resp, max(3, int(round(2 * s))), rel_threshold)
        if len(cand) < n:
            last = f"found {len(cand)} corner candidates, expected {n}"
            continue
        pts = np.array([_subpixel(resp, int(r), int(c)) for c, r, _ in cand])
        # the n strongest responses span the grid; weaker candidates may fill gaps
        ordered = _assign(pts, _outer_quad(pts[:n]), rows, cols)
        if ordered is not None:
            return _canonical(ordered, rows, cols)
        last = f"found {len(cand)} candidates but none form a {rows}x{cols} grid"
    raise DetectionError(f"{last}; supply an external corner file instead")


def _canonical(ordered: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Fix the row-major order to start top-left and run first along image x."""
    g = ordered.reshape(rows, cols, 2)
    if rows == cols:
        col_dir = g[0, -1] - g[0, 0]
        row_dir = g[-1, 0] - g[0, 0]
        if abs(row_dir[0]) > abs(col_dir[0]):
            g = g.transpose(1, 0, 2)
    if g[0, -1, 0] < g[0, 0, 0]:
        g = g[:, ::-1]
    if g[-1, 0, 1] < g[0, 0, 1]:
        g = g[::-1]
    return g.reshape(-1, 2).copy()


def load_corner_file(path, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Read externally supplied corners: CSV with x_px, y_px columns (header optional)."""
    pts = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                pts.append((float(row[0]), float(row[1])))
            except ValueError:
                continue  # header
    arr = np.asarray(pts, dtype=float)
    if rows is not None and cols is not None and len(arr) != rows * cols:
        raise DetectionError(f"corner file has {len(arr)} points, expected {rows * cols}")
    if not np.all(np.isfinite(arr)) or len(arr) == 0:
        raise DetectionError("corner file has no valid points")
    return arr


def grid_pitch(points: np.ndarray, rows: int, cols: int) -> float:
    g = points.reshape(rows, cols, 2)
    d = [np.linalg.norm(np.diff(g, axis=1), axis=2).ravel(), np.linalg.norm(np.diff(g, axis=0), axis=2).ravel()]
    return float(np.mean(np.concatenate(d)))

