"""Deterministic synthetic images for smoke runs and fixtures."""
from __future__ import annotations

import numpy as np


def textured_image(n: int = 48, seed: int = 0) -> np.ndarray:
    """``3 x n x n`` image in [0, 1]: an oriented sinusoid per channel, a
    6-pixel checker on red and blue, and a bright disc. Bilinear
    upsampling of its 4x bicubic reduction scores about 21 dB Y-PSNR."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.empty((3, n, n))
    for c in range(3):
        f1, f2 = rng.uniform(0.08, 0.2, 2)
        img[c] = 0.5 + 0.2 * np.sin(2 * np.pi * (f1 * xx + f2 * yy) + rng.uniform(0, 6))
        if c != 1:
            img[c] += 0.2 * (((xx // 6 + yy // 6) % 2) - 0.5)
        img[c] += 0.2 * ((xx - 30) ** 2 + (yy - 20) ** 2 < 80)
    return np.clip(img, 0.0, 1.0)
