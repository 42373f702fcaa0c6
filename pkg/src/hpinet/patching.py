"""Padding-free patch division, aggregation, and the cascaded size schedule.

A patch origin ``u`` along an axis of length ``H`` is valid when
``u % P == 0`` or ``u == H - P``. The last patch therefore overlaps its
neighbour whenever ``P`` does not divide ``H``; aggregation averages the
overlapping contributions.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import GeometryError, UsageError
from .tensor import Tensor


def patch_origins(extent: int, P: int) -> list[int]:
    if P < 1 or P > extent:
        raise GeometryError(f"patch size {P} does not fit extent {extent}")
    origins = list(range(0, extent - P + 1, P))
    if origins[-1] != extent - P:
        origins.append(extent - P)
    return origins


def _overlap_layers(origins: list[int], P: int) -> np.ndarray:
    # Only the trailing origin can overlap its predecessor.
    layers = np.zeros(len(origins), dtype=np.intp)
    if len(origins) > 1 and origins[-1] < origins[-2] + P:
        layers[-1] = 1
    return layers


@dataclass(frozen=True)
class PatchLayout:
    height: int
    width: int
    patch_size: int

    @cached_property
    def row_origins(self) -> list[int]:
        return patch_origins(self.height, self.patch_size)

    @cached_property
    def col_origins(self) -> list[int]:
        return patch_origins(self.width, self.patch_size)

    @cached_property
    def origins(self) -> list[tuple[int, int]]:
        return [(u, v) for u in self.row_origins for v in self.col_origins]

    def __len__(self) -> int:
        return len(self.row_origins) * len(self.col_origins)

    @cached_property
    def flat_index(self) -> np.ndarray:
        """``N x P*P`` indices into the row-major flattened ``H*W`` grid."""
        P = self.patch_size
        a = np.arange(P)
        local = (a[:, None] * self.width + a[None, :]).reshape(-1)
        starts = np.array([u * self.width + v for u, v in self.origins], dtype=np.intp)
        return starts[:, None] + local[None, :]

    @cached_property
    def groups(self) -> np.ndarray:
        """Overlap class (0..3) of each patch; patches in one class are disjoint."""
        rl = _overlap_layers(self.row_origins, self.patch_size)
        cl = _overlap_layers(self.col_origins, self.patch_size)
        return (2 * rl[:, None] + cl[None, :]).reshape(-1)

    @cached_property
    def coverage(self) -> np.ndarray:
        """How many patches cover each pixel, as an ``H x W`` integer map."""
        count = np.zeros(self.height * self.width, dtype=np.int64)
        np.add.at(count, self.flat_index.reshape(-1), 1)
        return count.reshape(self.height, self.width)


@dataclass
class PatchSet:
    """Patches stacked as one ``N x P*P x C`` tensor plus their layout."""

    layout: PatchLayout
    patches: Tensor

    def __len__(self) -> int:
        return self.patches.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.patches.data[i]


def divide(x: Tensor, P: int) -> PatchSet:
    c, h, w = x.shape
    if P > min(h, w):
        raise GeometryError(f"patch size {P} larger than feature map {h}x{w}")
    layout = PatchLayout(h, w, P)
    flat = T.transpose(T.reshape(x, (c, h * w)), (1, 0))
    return PatchSet(layout, T.take(flat, layout.flat_index))


def aggregate(ps: PatchSet) -> Tensor:
    """Paste patches back, averaging wherever several patches cover a pixel.

    Contributions are summed as a fixed pairwise tree over the four overlap
    classes, so unmodified patches reproduce the input bit for bit.
    """
    layout = ps.layout
    n, pp, c = ps.patches.shape
    if n != len(layout) or pp != layout.patch_size ** 2:
        raise GeometryError(f"patches {ps.patches.dims} inconsistent with layout "
                            f"{layout.height}x{layout.width}, P={layout.patch_size}")
    hw = layout.height * layout.width
    idx = layout.flat_index
    groups = layout.groups
    data = ps.patches.data
    canvases = np.zeros((4, hw, c), dtype=data.dtype)
    for g in range(4):
        sel = groups == g
        if sel.any():
            canvases[g][idx[sel].reshape(-1)] = data[sel].reshape(-1, c)
    total = (canvases[0] + canvases[1]) + (canvases[2] + canvases[3])
    inv = (1.0 / layout.coverage.reshape(hw, 1)).astype(data.dtype)
    out = (total * inv).T.reshape(c, layout.height, layout.width)

    def bw(g):
        gflat = g.reshape(c, hw).T * inv
        return (gflat[idx],)

    return T.op(np.ascontiguousarray(out), (ps.patches,), bw)


def cpd_schedule(cfg, block_index: int) -> int:
    if not 0 <= block_index < cfg.blocks:
        raise UsageError(f"block index {block_index} out of range for {cfg.blocks} blocks")
    return cfg.patch_sizes[block_index]


def border_mask(height: int, width: int, P: int) -> np.ndarray:
    """Pixels lying on the first or last row/column of some covering patch."""
    rows = np.zeros(height, dtype=bool)
    cols = np.zeros(width, dtype=bool)
    for u in patch_origins(height, P):
        rows[[u, u + P - 1]] = True
    for v in patch_origins(width, P):
        cols[[v, v + P - 1]] = True
    return rows[:, None] | cols[None, :]


def boundary_persistence(height: int, width: int, schedule: Sequence[int]) -> Fraction:
    """Fraction of pixels that sit on a patch border in every division of
    ``schedule``. Cascaded schedules drive this towards the outer ring."""
    if max(schedule) > min(height, width):
        raise GeometryError(f"schedule {list(schedule)} does not fit {height}x{width}")
    persistent = np.ones((height, width), dtype=bool)
    for P in schedule:
        persistent &= border_mask(height, width, P)
    return Fraction(int(persistent.sum()), height * width)
