"""Spatial discretization of print moves.

A print region is a maximal chain of consecutive extruding moves, each one
starting where the previous ended. Regions are cut into segments of a fixed
arc length (the last segment of every source move carries the remainder so
geometry is never stretched) and annotated with corners and straight spans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gcode import GMove, ToolPath

DEFAULT_STEP = 0.1
DEFAULT_CORNER_ANGLE = 30.0
_EPS = 1e-9


@dataclass(frozen=True)
class LineSpan:
    start: int
    end: int
    length: float


@dataclass(frozen=True)
class PrintRegion:
    record_indices: tuple[int, ...]
    moves: tuple[GMove, ...]

    @property
    def vertices(self) -> np.ndarray:
        pts = [self.moves[0].start] + [m.target for m in self.moves]
        return np.asarray(pts, dtype=float)


@dataclass(frozen=True)
class DiscretizedPath:
    points: np.ndarray
    step: float
    corner_indices: tuple[int, ...]
    line_spans: tuple[LineSpan, ...]
    segment_lengths: np.ndarray
    segment_source: np.ndarray = None  # index of the source move for each segment
    source_ratio: np.ndarray = None
    feedrate: np.ndarray = None
    warnings: tuple[str, ...] = field(default=())

    @property
    def n_segments(self) -> int:
        return len(self.segment_lengths)

    @property
    def arc_length(self) -> np.ndarray:
        """Arc length at every point, starting at 0."""
        return np.concatenate([[0.0], np.cumsum(self.segment_lengths)])

    @property
    def midpoints(self) -> np.ndarray:
        s = self.arc_length
        return 0.5 * (s[:-1] + s[1:])

    @property
    def total_length(self) -> float:
        return math.fsum(self.segment_lengths)

    def interior_corners(self) -> tuple[int, ...]:
        return tuple(c for c in self.corner_indices if 0 < c < self.n_segments)


def print_regions(path: ToolPath, keep_empty: bool = False) -> list[PrintRegion]:
    """Split a ToolPath into connected chains of print moves.

    A chain member is any move with an E word and XY displacement, so an
    already optimized file (which may retract mid-line) keeps its lines
    whole. Passthrough lines do not break a chain; moves without E and
    Z-only moves do. Chains that extrude nothing in total are dropped
    unless `keep_empty` is set.
    """
    regions: list[PrintRegion] = []
    cur_idx: list[int] = []
    cur_moves: list[GMove] = []

    def close():
        if cur_moves and (keep_empty or math.fsum(m.extrude for m in cur_moves) > 0):
            regions.append(PrintRegion(tuple(cur_idx), tuple(cur_moves)))
        cur_idx.clear()
        cur_moves.clear()

    for i, rec in enumerate(path.records):
        if not isinstance(rec, GMove):
            continue
        z_only = rec.start[0] == rec.target[0] and rec.start[1] == rec.target[1]
        if not rec.explicit_e or rec.length == 0 or z_only:
            close()
            continue
        if cur_moves and cur_moves[-1].target != rec.start:
            close()
        cur_idx.append(i)
        cur_moves.append(rec)
    close()
    return regions


def turn_angles(vertices: np.ndarray) -> np.ndarray:
    """Direction change in degrees at each interior vertex (0 = straight on)."""
    v = np.asarray(vertices, dtype=float)
    d_in = v[1:-1] - v[:-2]
    d_out = v[2:] - v[1:-1]
    n_in = np.linalg.norm(d_in, axis=1)
    n_out = np.linalg.norm(d_out, axis=1)
    cos = np.einsum("ij,ij->i", d_in, d_out) / np.maximum(n_in * n_out, 1e-300)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def _vertex_corners(vertices: np.ndarray, threshold: float) -> list[int]:
    n = len(vertices)
    interior = np.nonzero(turn_angles(vertices) >= threshold)[0] + 1
    return sorted({0, n - 1, *interior.tolist()})


def detect_corners(path, angle_threshold: float = DEFAULT_CORNER_ANGLE) -> list[int]:
    """Vertex indices where the toolpath turns by at least `angle_threshold`.

    `path` is a vertex array or a ToolPath. For a ToolPath the vertices of all
    print regions are concatenated and region endpoints are always reported,
    since the head is at rest there.
    """
    if not 0 < angle_threshold < 180:
        raise ValueError("angle threshold must lie in (0, 180) degrees")
    if isinstance(path, ToolPath):
        out, offset = [], 0
        for region in print_regions(path):
            verts = region.vertices
            out += [offset + i for i in _vertex_corners(verts, angle_threshold)]
            offset += len(verts)
        return out
    return _vertex_corners(np.asarray(path, dtype=float), angle_threshold)


def _discretize_vertices(verts, step, threshold, move_info=None) -> DiscretizedPath:
    verts = np.asarray(verts, dtype=float)
    if move_info is None:
        keep = np.r_[True, np.any(np.diff(verts, axis=0) != 0, axis=1)]
        verts = verts[keep]
    corner_vertices = set(_vertex_corners(verts, threshold))
    points = [verts[0]]
    lengths: list[float] = []
    source: list[int] = []
    corner_pts = [0]
    warnings = []
    for i in range(len(verts) - 1):
        a, b = verts[i], verts[i + 1]
        length = math.dist(a, b)
        if length == 0:
            continue
        if length < step:
            warnings.append(f"line {i} ({length:.4g} mm) is shorter than the step; kept as one segment")
        n = max(1, math.ceil(length / step - _EPS))
        direction = (b - a) / length
        for j in range(1, n):
            points.append(a + direction * (j * step))
        points.append(b)
        lengths += [step] * (n - 1) + [length - (n - 1) * step]
        source += [i] * n
        if i + 1 in corner_vertices:
            corner_pts.append(len(points) - 1)
    if corner_pts[-1] != len(points) - 1:
        corner_pts.append(len(points) - 1)
    spans = []
    seg_len = np.asarray(lengths)
    for s, e in zip(corner_pts[:-1], corner_pts[1:]):
        ell = math.fsum(seg_len[s:e])
        if ell < step - _EPS:
            warnings.append(f"span {s}-{e} is shorter than the step")
        spans.append(LineSpan(s, e, ell))
    source_arr = np.asarray(source, dtype=int)
    ratio = feed = None
    if move_info is not None:
        ratios, feeds = move_info
        ratio = np.asarray(ratios, dtype=float)[source_arr]
        feed = np.asarray(feeds, dtype=float)[source_arr]
    return DiscretizedPath(
        points=np.asarray(points),
        step=step,
        corner_indices=tuple(corner_pts),
        line_spans=tuple(spans),
        segment_lengths=seg_len,
        segment_source=source_arr,
        source_ratio=ratio,
        feedrate=feed,
        warnings=tuple(warnings),
    )


def discretize_region(region: PrintRegion, step: float = DEFAULT_STEP,
                      angle_threshold: float = DEFAULT_CORNER_ANGLE) -> DiscretizedPath:
    if not step > 0:
        raise ValueError("step must be positive")
    ratios = [m.ratio for m in region.moves]
    feeds = [m.feedrate if m.feedrate is not None else math.nan for m in region.moves]
    return _discretize_vertices(region.vertices, step, angle_threshold, (ratios, feeds))


def discretize(path, step: float = DEFAULT_STEP,
               angle_threshold: float = DEFAULT_CORNER_ANGLE) -> DiscretizedPath:
    """Cut a connected print path into segments of length `step`.

    Accepts a ToolPath with a single print region, an existing
    DiscretizedPath (re-discretization), or an (M, 3) vertex array.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if not 0 < angle_threshold < 180:
        raise ValueError("angle threshold must lie in (0, 180) degrees")
    if isinstance(path, ToolPath):
        regions = print_regions(path)
        if not regions:
            raise ValueError("toolpath has no print moves")
        if len(regions) > 1:
            raise ValueError(f"toolpath has {len(regions)} disconnected print regions; "
                             "discretize them one by one with discretize_region")
        return discretize_region(regions[0], step, angle_threshold)
    if isinstance(path, DiscretizedPath):
        out = _discretize_vertices(path.points, step, angle_threshold)
        if path.source_ratio is not None:
            # segments map one-to-one when the step is unchanged
            if out.n_segments == path.n_segments:
                out = DiscretizedPath(out.points, out.step, out.corner_indices, out.line_spans,
                                      out.segment_lengths, path.segment_source, path.source_ratio,
                                      path.feedrate, out.warnings)
        return out
    verts = np.asarray(path, dtype=float)
    if verts.ndim != 2 or verts.shape[1] != 3 or len(verts) < 2:
        raise ValueError("vertices must be an (M, 3) array with M >= 2")
    return _discretize_vertices(verts, step, angle_threshold)
