"""Photo to width profiles: board detection, rectification, segmentation, PCA widths."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..dynamics import WidthProfile
from .checkerboard import detect_checkerboard
from .homography import Homography, board_homography, rectify
from .image import GrayImage
from .measure import measure_widths
from .segment import cluster_gmm, cluster_kmeans, gmm_level_threshold, gmm_line_mask, threshold_kmeans

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ROI:
    name: str
    x0: float  # board mm
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"ROI {self.name!r} has no area")


@dataclass
class VisionConfig:
    rows: int = 7
    cols: int = 10
    square_mm: float = 2.0
    px_per_mm: float = 20.0
    extent_mm: tuple[float, float, float, float] = (-4.0, -4.0, 60.0, 18.0)
    rois: list[ROI] = field(default_factory=list)
    threshold_n: float = 2.0
    sample_pitch: float = 0.1
    gmm_rule: str = "level"

    @classmethod
    def from_dict(cls, d: dict) -> "VisionConfig":
        board = d.get("checkerboard", {})
        rois = [ROI(r["name"], *r["rect_mm"]) for r in d.get("rois", [])]
        return cls(
            rows=int(board.get("rows", 7)),
            cols=int(board.get("cols", 10)),
            square_mm=float(board.get("square_size_mm", 2.0)),
            px_per_mm=float(d.get("px_per_mm", 20.0)),
            extent_mm=tuple(d.get("extent_mm", (-4.0, -4.0, 60.0, 18.0))),
            rois=rois,
            threshold_n=float(d.get("threshold_n", 2.0)),
            sample_pitch=float(d.get("sample_pitch", 0.1)),
            gmm_rule=str(d.get("gmm_rule", "level")),
        )


@dataclass
class RoiMeasurement:
    profile: WidthProfile
    method: str
    blurry: bool
    threshold: float | None
    warnings: list[str] = field(default_factory=list)


@dataclass
class PhotoMeasurement:
    homography: Homography
    rectified: GrayImage
    corners: np.ndarray
    rois: dict[str, RoiMeasurement]


def segment_roi(patch: np.ndarray, blurry: str = "auto", n: float = 2.0,
                gmm_rule: str = "level") -> tuple[np.ndarray, str, bool, float | None]:
    """Bead mask for a rectified patch; K-means threshold when sharp, GMM when blurry.

    `gmm_rule` is "level" (cut halfway between the bed and bead component
    means) or "responsibility" (brightest component most responsible).
    """
    pixels = patch.ravel()
    km = cluster_kmeans(pixels)
    gmm = None
    if blurry == "auto":
        # blur shows up as a heavy middle component in the mixture fit
        gmm = cluster_gmm(pixels, init=km)
        is_blurry = gmm[0].looks_blurry()
    else:
        is_blurry = blurry == "on"
    if is_blurry:
        summary, resp = gmm or cluster_gmm(pixels, init=km)
        if gmm_rule == "responsibility":
            return gmm_line_mask(resp).reshape(patch.shape), "gmm", True, None
        if gmm_rule != "level":
            raise ValueError(f"unknown GMM rule {gmm_rule!r}")
        thr = gmm_level_threshold(summary)
        return patch > thr, "gmm", True, thr
    thr = threshold_kmeans(km, n)
    return patch > thr, "kmeans", False, thr


def measure_image(image: GrayImage, config: VisionConfig, corners=None, blurry: str = "auto",
                  method: str | None = None) -> PhotoMeasurement:
    """Full measurement of one photo. `method` forces "kmeans" or "gmm" for every ROI."""
    if corners is None:
        corners = detect_checkerboard(image, config.rows, config.cols)
    corners = np.asarray(corners, dtype=float)
    x0, y0, x1, y1 = config.extent_mm
    h = board_homography(corners, config.rows, config.cols, config.square_mm, config.px_per_mm, (x0, y0))
    for w in h.warnings:
        log.warning(w)
    shape = (int(round((y1 - y0) * config.px_per_mm)), int(round((x1 - x0) * config.px_per_mm)))
    rect = rectify(image, h, shape)
    out = {}
    for roi in config.rois:
        c0 = int(round((roi.x0 - x0) * config.px_per_mm))
        c1 = int(round((roi.x1 - x0) * config.px_per_mm))
        r0 = int(round((roi.y0 - y0) * config.px_per_mm))
        r1 = int(round((roi.y1 - y0) * config.px_per_mm))
        patch = rect.data[max(r0, 0):r1, max(c0, 0):c1]
        if patch.size == 0:
            raise ValueError(f"ROI {roi.name!r} lies outside the rectified frame")
        mode = blurry if method is None else ("on" if method == "gmm" else "off")
        mask, used, is_blurry, thr = segment_roi(patch, mode, config.threshold_n, config.gmm_rule)
        warnings: list[str] = []
        prof = measure_widths(None, mask, h.pixel_scale, config.sample_pitch, warnings)
        out[roi.name] = RoiMeasurement(prof, used, is_blurry, thr, warnings)
    return PhotoMeasurement(h, rect, corners, out)
