"""Rendered stand-ins for phone photos of printed lines next to a checkerboard.

The scene is defined on the bed plane in board millimetres (origin at the
first inner corner, x along board columns, y along rows). A pinhole camera
tilted about the bed's x axis views it; pixels are supersampled so edges
are anti-aliased like a real sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .vision.homography import board_points, project
from .vision.image import GrayImage

BED = 0.12
BEAD = 0.88
BOARD_DARK = 0.05
BOARD_LIGHT = 0.95


@dataclass(frozen=True)
class Bead:
    x0: float
    x1: float
    y: float
    width: float
    blurred: bool = False


@dataclass
class Scene:
    rows: int = 7  # inner corners
    cols: int = 10
    square: float = 2.0  # mm
    beads: list[Bead] = field(default_factory=list)
    extent: tuple[float, float, float, float] = (-4.0, -4.0, 64.0, 40.0)  # x0, y0, x1, y1 in mm

    def intensity(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.full(x.shape, BED)
        # board squares span one square beyond the outermost inner corners
        bx0, by0 = -self.square, -self.square
        bx1, by1 = self.cols * self.square, self.rows * self.square
        on_board = (x >= bx0) & (x < bx1) & (y >= by0) & (y < by1)
        i = np.floor(x / self.square).astype(int)
        j = np.floor(y / self.square).astype(int)
        out = np.where(on_board, np.where((i + j) % 2 == 0, BOARD_DARK, BOARD_LIGHT), out)
        for b in self.beads:
            hit = (x >= b.x0) & (x <= b.x1) & (np.abs(y - b.y) <= 0.5 * b.width)
            out = np.where(hit, BEAD, out)
        return out


def camera_homography(scene: Scene, px_per_mm: float, tilt_deg: float = 25.0, rotate_deg: float = 0.0):
    """Bed-mm to image-px map of a camera pitched by `tilt_deg` about the bed x axis.

    Scaled so the centre of the scene images at roughly `px_per_mm`.
    """
    x0, y0, x1, y1 = scene.extent
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    t = math.radians(tilt_deg)
    r = math.radians(rotate_deg)
    dist = 4.0 * max(x1 - x0, y1 - y0)
    # bed point (x, y, 0) relative to scene centre, camera rotated about x then z
    rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, math.cos(t), -math.sin(t)], [0, math.sin(t), math.cos(t)]])
    rot = rx @ rz
    # columns: image of bed x axis, bed y axis, bed origin (centre) at depth dist
    p = np.c_[rot[:, 0], rot[:, 1], np.array([0.0, 0.0, dist])]
    k = np.diag([px_per_mm * dist, px_per_mm * dist, 1.0])
    h = k @ p @ np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    h = h / h[2, 2]
    corners = project(h, np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
    shift = corners.min(axis=0) - 2.0
    h = np.array([[1, 0, -shift[0]], [0, 1, -shift[1]], [0, 0, 1]]) @ h
    size = np.ceil(project(h, np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])).max(axis=0) + 2.0)
    return h / h[2, 2], (int(size[1]), int(size[0]))


def render(scene: Scene, px_per_mm: float = 20.0, tilt_deg: float = 25.0, rotate_deg: float = 0.0,
           blur_sigma_px: float = 3.0, noise: float = 0.01, supersample: int = 4, seed: int = 0):
    """Render the scene; returns (GrayImage, bed-to-image homography, true board corners px)."""
    h, (rows, cols) = camera_homography(scene, px_per_mm, tilt_deg, rotate_deg)
    hinv = np.linalg.inv(h)
    acc = np.zeros((rows, cols))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    yy, xx = np.mgrid[0:rows, 0:cols].astype(float)
    for oy in offs:
        for ox in offs:
            bed = project(hinv, np.c_[(xx + ox).ravel(), (yy + oy).ravel()])
            acc += scene.intensity(bed[:, 0], bed[:, 1]).reshape(rows, cols)
    img = acc / supersample**2
    blurred = [b for b in scene.beads if b.blurred]
    if blurred and blur_sigma_px > 0:
        soft = ndimage.gaussian_filter(img, blur_sigma_px)
        region = np.zeros((rows, cols), dtype=bool)
        bed = project(hinv, np.c_[xx.ravel(), yy.ravel()])
        bx, by = bed[:, 0].reshape(rows, cols), bed[:, 1].reshape(rows, cols)
        pad = 6.0 * blur_sigma_px / px_per_mm + 1.0
        for b in blurred:
            region |= (bx >= b.x0 - pad) & (bx <= b.x1 + pad) & (np.abs(by - b.y) <= 0.5 * b.width + pad)
        img = np.where(region, soft, img)
    if noise > 0:
        img = img + np.random.default_rng(seed).normal(0.0, noise, img.shape)
    truth = project(h, board_points(scene.rows, scene.cols, scene.square))
    return GrayImage(np.clip(img, 0.0, 1.0)), h, truth


def acceptance_scene(widths=(0.45, 0.55, 0.68, 0.80), blurred: bool = False, square: float = 2.0) -> Scene:
    """Board on the left, four horizontal beads to its right."""
    beads = [Bead(24.0, 56.0, 2.0 + 3.5 * i, w, blurred) for i, w in enumerate(widths)]
    return Scene(rows=7, cols=10, square=square, beads=beads, extent=(-4.0, -4.0, 60.0, 18.0))
