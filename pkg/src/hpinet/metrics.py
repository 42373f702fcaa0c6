"""PSNR and SSIM on the luma channel."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import UsageError
from .imaging import ImagePlane, rgb_to_y


def _plane(x) -> np.ndarray:
    if isinstance(x, ImagePlane):
        if x.space == "RGB":
            x = rgb_to_y(x)
        return x.data[0]
    x = np.asarray(x, dtype=np.float64)
    return x[0] if x.ndim == 3 else x


def _shave(a: np.ndarray, b: np.ndarray, shave: int):
    if a.shape != b.shape:
        raise UsageError(f"image dims differ: {a.shape} vs {b.shape}")
    if shave:
        if min(a.shape) <= 2 * shave:
            raise UsageError(f"cannot shave {shave} pixels from {a.shape}")
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    return a, b


def psnr(a, b, shave: int = 0) -> float:
    """10 log10(1 / MSE) for [0, 1] data; ``inf`` when the images match.

    RGB planes are converted to Y first. ``shave`` pixels are dropped from
    every border, the usual convention being ``shave = scale``.
    """
    a, b = _shave(_plane(a), _plane(b), shave)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, shave: int = 0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM with a Gaussian window, evaluated only where the window fits."""
    a, b = _shave(_plane(a), _plane(b), shave)
    if min(a.shape) < window:
        raise UsageError(f"SSIM needs at least {window}x{window} pixels, got {a.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a * mu_a
    s_bb = _filter_valid(b * b, g) - mu_b * mu_b
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))
