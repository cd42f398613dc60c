"""Differentiable multi-scale structural similarity.

Standard construction: 11x11 Gaussian window (sigma 1.5), valid
convolution, contrast-structure terms from the first scales combined with
the full SSIM at the coarsest scale, 2x mean-pool downsampling in between
(trailing odd rows/columns dropped).  Five scales need min(H, W) >= 176;
smaller inputs fall back to three (or fewer) scales with renormalized
weights so 64px training patches still work.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
_POWER_FLOOR = 1e-6
_FIVE_SCALE_MIN = 176


def gaussian_window(dtype=np.float64) -> np.ndarray:
    coords = np.arange(WIN_SIZE, dtype=np.float64) - WIN_SIZE // 2
    g = np.exp(-(coords**2) / (2.0 * WIN_SIGMA**2))
    return (g / g.sum()).astype(dtype)


def scale_count(h: int, w: int) -> int:
    """Number of usable scales for an image: 5 at full size, fewer when small."""
    side = min(h, w)
    if side < WIN_SIZE:
        raise ValueError(f"image side {side} smaller than the {WIN_SIZE}px window")
    limit = 5 if side >= _FIVE_SCALE_MIN else 3
    usable = 1
    while usable < limit and side // (2**usable) >= WIN_SIZE:
        usable += 1
    return usable


def _blur(x: Tensor, win: np.ndarray) -> Tensor:
    """Separable valid Gaussian filter over the last two axes of NCHW."""
    n, c, h, w = x.shape
    flat = T.reshape(x, (n * c, 1, h, w))
    kv = Tensor(win.reshape(1, 1, WIN_SIZE, 1))
    kh = Tensor(win.reshape(1, 1, 1, WIN_SIZE))
    out = T.conv2d(T.conv2d(flat, kv), kh)
    return T.reshape(out, (n, c, h - WIN_SIZE + 1, w - WIN_SIZE + 1))


def _ssim_terms(a: Tensor, b: Tensor, win: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean SSIM and mean contrast-structure term at one scale."""
    c1 = K1 * K1
    c2 = K2 * K2
    mu_a = _blur(a, win)
    mu_b = _blur(b, win)
    mu_aa = T.mul(mu_a, mu_a)
    mu_bb = T.mul(mu_b, mu_b)
    mu_ab = T.mul(mu_a, mu_b)
    var_a = T.sub(_blur(T.mul(a, a), win), mu_aa)
    var_b = T.sub(_blur(T.mul(b, b), win), mu_bb)
    cov = T.sub(_blur(T.mul(a, b), win), mu_ab)
    cs_map = T.div(T.add(T.mul(cov, 2.0), c2), T.add(T.add(var_a, var_b), c2))
    lum_map = T.div(T.add(T.mul(mu_ab, 2.0), c1), T.add(T.add(mu_aa, mu_bb), c1))
    ssim_map = T.mul(lum_map, cs_map)
    return T.mean(ssim_map), T.mean(cs_map)


def ms_ssim(a: Tensor, b: Tensor, scales: int | None = None) -> Tensor:
    """Multi-scale SSIM of two (N, C, H, W) image tensors in [0, 1].

    Differentiable w.r.t. both inputs; the result is a scalar in [-1, 1]
    (negative terms are floored before the weighted product).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ValueError("expected (N, C, H, W) tensors")
    n_scales = scale_count(a.shape[2], a.shape[3]) if scales is None else scales
    if n_scales < 1 or n_scales > 5:
        raise ValueError("scales must be in 1..5")
    win = gaussian_window(np.dtype(a.dtype).type)
    weights = np.asarray(SCALE_WEIGHTS[:n_scales], dtype=np.float64)
    weights = weights / weights.sum()

    out = None
    for level in range(n_scales):
        ssim_mean, cs_mean = _ssim_terms(a, b, win)
        term = ssim_mean if level == n_scales - 1 else cs_mean
        factor = T.power(T.clamp(term, _POWER_FLOOR, None), float(weights[level]))
        out = factor if out is None else T.mul(out, factor)
        if level < n_scales - 1:
            a = T.avg_pool2d(a, 2)
            b = T.avg_pool2d(b, 2)
    return out


def ms_ssim_db(value: float) -> float:
    """Reporting transform -10*log10(1 - v), capped at 100 dB."""
    if value >= 1.0 - 1e-10:
        return 100.0
    return min(100.0, -10.0 * math.log10(1.0 - value))
