"""Image planes, PNG I/O, color conversion and resampling kernels."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, UsageError

Space = Literal["RGB", "Y"]


@dataclass
class ImagePlane:
    """Float image in [0, 1], stored channel-major as ``C x H x W``."""

    data: np.ndarray
    space: Space = "RGB"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[None]
        if d.ndim != 3 or d.shape[0] not in (1, 3):
            raise UsageError(f"image data must be 1 or 3 channels, got dims {d.shape}")
        if self.space not in ("RGB", "Y"):
            raise UsageError(f"unknown color space {self.space!r}")
        if (self.space == "RGB") != (d.shape[0] == 3):
            raise UsageError(f"{self.space} image cannot have {d.shape[0]} channels")
        self.data = np.clip(d, 0.0, 1.0)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def read_png(path) -> ImagePlane:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("RGBA", "P", "CMYK"):
                im, mode = im.convert("RGB"), "RGB"
            elif mode == "LA":
                im, mode = im.convert("L"), "L"
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    if mode == "RGB":
        return ImagePlane(arr.transpose(2, 0, 1) / 255.0, "RGB")
    if mode == "L":
        return ImagePlane(arr / 255.0, "Y")
    if mode.startswith("I;16") or mode == "I":
        return ImagePlane(arr.astype(np.float64) / 65535.0, "Y")
    raise FormatError(f"unsupported PNG mode {mode} in {path}")


def to_uint8(img: ImagePlane) -> np.ndarray:
    return np.round(img.data * 255.0).astype(np.uint8)


def write_png(path, img: ImagePlane) -> None:
    q = to_uint8(img)
    pil = Image.fromarray(q[0]) if img.channels == 1 else Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0)))
    pil.save(Path(path), format="PNG")


def rgb_to_y(img: ImagePlane) -> ImagePlane:
    """BT.601 studio-swing luma, returned on the [0, 1] scale."""
    if img.space != "RGB":
        raise UsageError(f"rgb_to_y needs an RGB image, got {img.space}")
    r, g, b = img.data
    y = (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
    return ImagePlane(y[None], "Y")


# --- resampling -------------------------------------------------------------


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(img, out_h: int, out_w: int):
    """Bilinear resampling with half-pixel centers (align_corners=False).

    Accepts an :class:`ImagePlane` or a raw ``C x H x W`` array and returns
    the same kind.
    """
    if out_h < 1 or out_w < 1:
        raise UsageError(f"target size must be positive, got {out_h}x{out_w}")
    data = img.data if isinstance(img, ImagePlane) else np.asarray(img)
    _, h, w = data.shape
    out = _bilinear_matrix(h, out_h) @ data @ _bilinear_matrix(w, out_w).T
    return ImagePlane(out, img.space) if isinstance(img, ImagePlane) else out


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _bicubic_matrix(n_in: int, n_out: int, scale: float, antialias: bool = True) -> np.ndarray:
    # MATLAB imresize convention: 1-based output coordinates mapped back into
    # the input, kernel stretched by 1/scale when shrinking, symmetric borders.
    width = 4.0
    shrink = antialias and scale < 1
    if shrink:
        width /= scale
    x = np.arange(1, n_out + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    ind = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - ind
    wts = scale * cubic(scale * dist) if shrink else cubic(dist)
    wts = wts / wts.sum(axis=1, keepdims=True)
    # 1-based indices reflected into [1, n_in]
    aux = np.concatenate([np.arange(1, n_in + 1), np.arange(n_in, 0, -1)])
    ind0 = aux[np.mod(ind.astype(int) - 1, 2 * n_in)] - 1
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), ind0.reshape(-1)), wts.reshape(-1))
    return m


def bicubic_resize(data: np.ndarray, scale: float, out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """MATLAB-style bicubic resize of a ``C x H x W`` array by ``scale``."""
    _, h, w = data.shape
    out_h, out_w = out_hw or (int(np.ceil(h * scale)), int(np.ceil(w * scale)))
    mh = _bicubic_matrix(h, out_h, scale)
    mw = _bicubic_matrix(w, out_w, scale)
    return mh @ data @ mw.T
