"""Per-pixel signal-to-noise map used to blend local and non-local features.

The map estimates noise from a noisy image alone: box-average the grayscale
image, take the absolute residual as a noise proxy, and form the ratio of
smoothed signal to residual.  The result is clamped to [0,1] so it can act
as a convex mixing weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Image
from .tensor import Tensor, resize_bilinear

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601 luma


@dataclass
class SnrMap:
    """H x W map in [0,1] aligned with its source image."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("SNR map must be 2-d")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("SNR map values must lie in [0, 1]")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def to_grayscale(img: Image) -> Tensor:
    """Weighted RGB-to-luma conversion; output stays in [0,1]."""
    r, g, b = GRAY_WEIGHTS
    px = img.pixels
    gray = r * px[:, :, 0] + g * px[:, :, 1] + b * px[:, :, 2]
    return Tensor(gray)


def compute_snr_map(img: Image, kernel_size: int = 5, eps: float = 1e-6) -> SnrMap:
    """Ratio of box-smoothed luma to the absolute smoothing residual.

    Replicate padding at the borders; eps keeps locally constant regions
    (zero residual) from dividing by zero, and the clamp maps them to 1.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd and >= 1")
    gray = to_grayscale(img).data
    smoothed = ndimage.uniform_filter(gray, size=kernel_size, mode="nearest")
    residual = np.abs(gray - smoothed)
    raw = smoothed / (residual + eps)
    return SnrMap(np.clip(raw, 0.0, 1.0))


def resize_snr(s: SnrMap, h: int, w: int) -> Tensor:
    """Bilinear resize to a feature-map scale, shaped (1, h, w)."""
    t = Tensor(s.values[None, :, :])
    out = resize_bilinear(t, h, w)
    return Tensor(np.clip(out.data, 0.0, 1.0))


def snr_map_stack(batch: np.ndarray, kernel_size: int = 5, eps: float = 1e-6) -> np.ndarray:
    """SNR maps for a (N, 3, H, W) batch, stacked as (N, H, W).

    Identical to per-image compute_snr_map; the size-1 filter axis keeps
    batch items independent.
    """
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W), got {batch.shape}")
    r, g, b = GRAY_WEIGHTS
    arr = np.asarray(batch, dtype=np.float64)
    gray = r * arr[:, 0] + g * arr[:, 1] + b * arr[:, 2]
    smoothed = ndimage.uniform_filter(gray, size=(1, kernel_size, kernel_size), mode="nearest")
    residual = np.abs(gray - smoothed)
    return np.clip(smoothed / (residual + eps), 0.0, 1.0)
