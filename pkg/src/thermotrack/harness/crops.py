"""Square crops around boxes, resampled to a fixed edge, and crop augmentations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from thermotrack.model.head import BBox


@dataclass(frozen=True)
class CropWindow:
    """A square frame region ``[x0, x0 + side) × [y0, y0 + side)`` resampled to ``out`` pixels."""

    x0: float
    y0: float
    side: float
    out: int

    @property
    def scale(self) -> float:
        """Crop pixels per frame pixel."""
        return self.out / self.side

    def to_crop(self, box: Sequence[float]) -> tuple[float, float, float, float]:
        """Frame ``(x, y, w, h)`` to crop-pixel ``(cx, cy, w, h)``."""
        x, y, w, h = box
        s = self.scale
        return (x + w / 2 - self.x0) * s, (y + h / 2 - self.y0) * s, w * s, h * s

    def to_frame(self, cx: float, cy: float, w: float, h: float) -> np.ndarray:
        """Crop-pixel ``(cx, cy, w, h)`` to frame ``(x, y, w, h)``."""
        s = self.scale
        fw, fh = w / s, h / s
        return np.array([cx / s + self.x0 - fw / 2, cy / s + self.y0 - fh / 2, fw, fh])


def crop_window(
    box: Sequence[float],
    factor: float,
    frame_edge: int,
    out: int,
    *,
    shift: tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
) -> CropWindow:
    """Square window of side ``sqrt(w*h) * factor`` centered on ``box``.

    ``shift`` moves the center by a fraction of the side and ``scale``
    multiplies the side; the window is then clamped inside the frame.
    """
    x, y, w, h = (float(v) for v in box)
    side = min(float(frame_edge), max(1.0, math.sqrt(w * h) * factor * scale))
    cx = x + w / 2 + shift[0] * side
    cy = y + h / 2 + shift[1] * side
    x0 = min(max(cx - side / 2, 0.0), frame_edge - side)
    y0 = min(max(cy - side / 2, 0.0), frame_edge - side)
    return CropWindow(x0=x0, y0=y0, side=side, out=out)


def extract(image: np.ndarray, window: CropWindow) -> np.ndarray:
    """Bilinear resample of a ``3×E×E`` image over ``window``."""
    step = window.side / window.out
    centers = (np.arange(window.out) + 0.5) * step - 0.5
    yy, xx = np.meshgrid(window.y0 + centers, window.x0 + centers, indexing="ij")
    return np.stack(
        [ndimage.map_coordinates(ch, [yy, xx], order=1, mode="nearest") for ch in image]
    )


def rotate(crop: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a ``3×E×E`` crop about its center by ``angle`` degrees."""
    return ndimage.rotate(crop, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")


def grayscale(crop: np.ndarray) -> np.ndarray:
    return np.repeat(crop.mean(axis=0, keepdims=True), crop.shape[0], axis=0)


def grid_box(window: CropWindow, box: Sequence[float], patch: int) -> BBox:
    """Frame box to a :class:`BBox` on the search feature grid."""
    cx, cy, w, h = window.to_crop(box)
    return BBox(
        x=cx / patch,
        y=cy / patch,
        w=min(1.0, w / window.out),
        h=min(1.0, h / window.out),
    )


def frame_box(window: CropWindow, bbox: BBox, patch: int, frame_edge: int) -> np.ndarray:
    """Decoded grid box back to a frame ``(x, y, w, h)``, kept inside the frame."""
    cx, cy, w, h = bbox.to_pixels(patch, window.out)
    x, y, fw, fh = window.to_frame(cx, cy, w, h)
    fw = min(max(fw, 1.0), float(frame_edge))
    fh = min(max(fh, 1.0), float(frame_edge))
    x = min(max(x, 0.0), frame_edge - fw)
    y = min(max(y, 0.0), frame_edge - fh)
    return np.array([x, y, fw, fh])
