"""Hounsfield windowing and pseudo-RGB conversion.

CT pixel values are calibrated Hounsfield units (HU): water = 0, air is
about -1000, liver parenchyma typically 50-60. Windowing clamps HU into an
interval and rescales it linearly onto [0, 1] so that tissues inside the
interval occupy the full display/model range.

Two windows are used throughout this toolkit: a narrow one that isolates
liver-like attenuation and a wide one that keeps most soft tissue visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 12-bit CT convention; raw volumes are saturated into this range at load time.
HU_MIN = -1024
HU_MAX = 3071


@dataclass(frozen=True)
class ClipWindow:
    """A (low, high) HU interval used for clipping and scaling."""

    low: int
    high: int

    def __post_init__(self):
        if self.low >= self.high:
            raise ValueError(f"degenerate window: low={self.low} >= high={self.high}")

    @property
    def width(self) -> int:
        return self.high - self.low


NARROW_WINDOW = ClipWindow(50, 150)
WIDE_WINDOW = ClipWindow(-200, 300)


def clip_and_scale(hu: np.ndarray, window: ClipWindow) -> np.ndarray:
    """Clamp HU values into ``window`` and rescale linearly onto [0, 1].

    Args:
        hu: array of Hounsfield units (any shape).
        window: clipping interval; must satisfy low < high.

    Returns:
        float32 array of the same shape with values in [0, 1]. The transform
        is one-way: pixels outside the window saturate at 0 or 1.
    """
    if not isinstance(window, ClipWindow):
        window = ClipWindow(*window)
    clipped = np.clip(np.asarray(hu, dtype=np.float32), window.low, window.high)
    return (clipped - window.low) / np.float32(window.width)


def pseudo_rgb(img: np.ndarray) -> np.ndarray:
    """Stack a single-channel image three times along a trailing channel axis.

    Encoders expect 3-channel inputs; CT slices are single-channel, so the
    slice is replicated. Returns an (H, W, 3) float32 array.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    return np.repeat(img[:, :, None], 3, axis=2)
