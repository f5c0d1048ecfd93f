from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

LUMA = (0.2126, 0.7152, 0.0722)


@dataclass(frozen=True)
class GrayImage:
    """Row-major luminance in [0, 1]; pixel (row, col) has its centre at (col, row)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 2 or d.shape[0] == 0 or d.shape[1] == 0:
            raise ValueError("image must be a nonempty 2-D array")
        if not np.all(np.isfinite(d)):
            raise ValueError("image samples must be finite")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def to_gray(array: np.ndarray) -> np.ndarray:
    a = np.asarray(array, dtype=float)
    if a.ndim == 3:
        a = a[..., :3] @ np.asarray(LUMA)
    return a


def load_image(path) -> GrayImage:
    """Read PNG/PGM/PPM (8 or 16 bit) as luminance."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            a = np.asarray(im, dtype=float) / 65535.0
        else:
            a = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=float) / 255.0
    return GrayImage(np.clip(to_gray(a), 0.0, 1.0))


def save_image(image: GrayImage | np.ndarray, path) -> None:
    data = image.data if isinstance(image, GrayImage) else np.asarray(image, dtype=float)
    out = np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out).save(path)
