"""Training loop: progressive crops, dihedral augmentation, bicubic LR
synthesis, L1 loss and Adam with step-halved learning rate."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import HpiConfig, TrainConfig
from .errors import NumericError, UsageError
from .imaging import ImagePlane, bicubic_resize, read_png
from .model import (ForwardContext, dumps_rng, forward_tensor, init_params, loads_rng,
                    read_checkpoint, save_checkpoint)
from .tensor import AdamState

log = logging.getLogger(__name__)


def lr_at(epoch: int, tc: TrainConfig) -> float:
    return tc.base_lr * 0.5 ** (epoch // tc.lr_half_period)


def crop_at(epoch: int, tc: TrainConfig, scale: int, max_patch: int = 1) -> int:
    """HR crop size for ``epoch``: linear from crop_start (first epoch) to
    crop_end (last epoch), floored to a multiple of ``scale``."""
    if tc.epochs <= 1:
        return tc.crop_start
    raw = tc.crop_start + (tc.crop_end - tc.crop_start) * min(epoch, tc.epochs - 1) / (tc.epochs - 1)
    size = int(math.floor(raw / scale + 1e-9)) * scale
    size = max(size, scale * max_patch)
    return min(max(size, tc.crop_start), tc.crop_end)


def degrade(hr, scale: int):
    """Bicubic (a = -0.5, antialiased) downscale by an integer factor, clamped to [0, 1]."""
    data = hr.data if isinstance(hr, ImagePlane) else np.asarray(hr, dtype=np.float64)
    _, h, w = data.shape
    if h % scale or w % scale:
        raise UsageError(f"HR dims {h}x{w} not divisible by scale {scale}")
    out = data.copy() if scale == 1 else np.clip(bicubic_resize(data, 1.0 / scale, (h // scale, w // scale)), 0.0, 1.0)
    return ImagePlane(out, hr.space) if isinstance(hr, ImagePlane) else out


def dihedral(x: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 flip/rotation transforms of a ``C x H x W`` array."""
    y = np.rot90(x, k % 4, axes=(1, 2))
    if k >= 4:
        y = y[:, :, ::-1]
    return np.ascontiguousarray(y)


@dataclass
class Dataset:
    hr: list[np.ndarray]
    names: list[str]
    lr: list[np.ndarray] | None = None  # paired mode only

    def __len__(self) -> int:
        return len(self.hr)


def _rgb(img: ImagePlane) -> np.ndarray:
    return img.data if img.channels == 3 else np.repeat(img.data, 3, axis=0)


def load_dataset(data_dir, scale: int) -> Dataset:
    """Flat directory of HR PNGs, or ``HR/`` plus ``LRx{scale}/`` with matching names."""
    root = Path(data_dir)
    hr_dir, lr_dir = root / "HR", root / f"LRx{scale}"
    paired = hr_dir.is_dir() and lr_dir.is_dir()
    files = sorted((hr_dir if paired else root).glob("*.png"))
    if not files:
        raise UsageError(f"no PNG images found in {root}")
    hr = [_rgb(read_png(f)) for f in files]
    lr = None
    if paired:
        lr = [_rgb(read_png(lr_dir / f.name)) for f in files]
        for f, a, b in zip(files, hr, lr):
            if a.shape[1] != scale * b.shape[1] or a.shape[2] != scale * b.shape[2]:
                raise UsageError(f"{f.name}: HR {a.shape[1:]} is not {scale}x LR {b.shape[1:]}")
    return Dataset(hr, [f.name for f in files], lr)


@dataclass
class Batch:
    lr: list[np.ndarray]
    hr: list[np.ndarray]
    transforms: list[int]


def sample_batch(dataset: Dataset, crop: int, scale: int, augment: bool,
                 rng: np.random.Generator, batch_size: int = 1) -> Batch:
    usable = [i for i, im in enumerate(dataset.hr) if min(im.shape[1:]) >= crop]
    for i in set(range(len(dataset))) - set(usable):
        log.warning("skipping %s: smaller than crop %d", dataset.names[i], crop)
    if not usable:
        raise UsageError(f"no training image is at least {crop}x{crop}")
    lrs, hrs, ks = [], [], []
    for _ in range(batch_size):
        i = usable[int(rng.integers(len(usable)))]
        im = dataset.hr[i]
        y = scale * int(rng.integers((im.shape[1] - crop) // scale + 1))
        x = scale * int(rng.integers((im.shape[2] - crop) // scale + 1))
        k = int(rng.integers(8)) if augment else 0
        hr = dihedral(im[:, y:y + crop, x:x + crop], k)
        if dataset.lr is None:
            lr = degrade(hr, scale)
        else:
            c = crop // scale
            lr = dihedral(dataset.lr[i][:, y // scale:y // scale + c, x // scale:x // scale + c], k)
        lrs.append(lr)
        hrs.append(hr)
        ks.append(k)
    return Batch(lrs, hrs, ks)


@dataclass
class TrainState:
    cfg: HpiConfig
    params: dict
    adam: dict[str, AdamState]
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    losses: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: HpiConfig) -> "TrainState":
        params = init_params(cfg)
        adam = {n: AdamState.fresh(t) for n, t in params.items()}
        return cls(cfg, params, adam, np.random.default_rng(cfg.seed + 1))


def batch_loss(state: TrainState, batch: Batch) -> T.Tensor:
    ctx = ForwardContext("train", state.rng)
    total = None
    for lr, hr in zip(batch.lr, batch.hr):
        loss = T.l1_loss(forward_tensor(lr, state.params, state.cfg, ctx), hr)
        total = loss if total is None else T.add(total, loss)
    return T.scale(total, 1.0 / len(batch.lr))


def train_step(state: TrainState, batch: Batch, lr: float) -> float:
    """Gumbel-mode forward, L1 loss, backward, one Adam step per parameter."""
    with T.Tape() as tape:
        loss = batch_loss(state, batch)
    grads = tape.backward(loss)
    value = loss.item()
    if not math.isfinite(value):
        gmax = max((float(np.max(np.abs(g))) for g in grads.values()), default=0.0)
        raise NumericError(f"non-finite loss {value} at step {state.step}; max |grad| = {gmax:.3g}")
    for name, p in state.params.items():
        g = grads.get(p)
        T.adam_step(p, np.zeros_like(p.data) if g is None else g, state.adam[name], lr)
    state.step += 1
    state.losses.append(value)
    return value


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    crop: int


def run_training(state: TrainState, tc: TrainConfig, dataset: Dataset,
                 on_epoch: Callable[[EpochLog], None] | None = None,
                 checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Train from ``state.epoch`` up to ``tc.epochs``. ``checkpoint`` is called
    every ``tc.save_every`` epochs (if set) and after the last epoch."""
    cfg = state.cfg
    tc.validate(cfg.scale)
    steps = tc.steps_per_epoch or math.ceil(len(dataset) / tc.batch_size)
    while state.epoch < tc.epochs:
        lr = lr_at(state.epoch, tc)
        crop = crop_at(state.epoch, tc, cfg.scale, cfg.max_patch)
        losses = []
        for _ in range(steps):
            batch = sample_batch(dataset, crop, cfg.scale, tc.augment, state.rng, tc.batch_size)
            losses.append(train_step(state, batch, lr))
        if on_epoch:
            on_epoch(EpochLog(state.epoch, float(np.mean(losses)), lr, crop))
        state.epoch += 1
        if checkpoint and tc.save_every and state.epoch % tc.save_every == 0 and state.epoch < tc.epochs:
            checkpoint(state)
    if checkpoint:
        checkpoint(state)
    return state


def save_train_state(path, state: TrainState) -> None:
    extra = {"train.epoch": str(state.epoch), "train.step": str(state.step),
             "train.rng": dumps_rng(state.rng)}
    tensors = {}
    for name, st in state.adam.items():
        extra[f"adam.t.{name}"] = str(st.t)
        tensors[f"adam.m.{name}"] = st.m
        tensors[f"adam.v.{name}"] = st.v
    tensors["train.losses"] = np.asarray(state.losses, dtype=np.float32)
    save_checkpoint(path, state.cfg, state.params, extra, tensors)


def load_train_state(path, expect: HpiConfig | None = None) -> TrainState:
    ck = read_checkpoint(path, expect)
    if "train.rng" not in ck.extra:
        raise UsageError(f"{path} holds no training state to resume from")
    adam = {}
    for name, p in ck.params.items():
        adam[name] = AdamState(ck.extra_tensors[f"adam.m.{name}"].copy(),
                               ck.extra_tensors[f"adam.v.{name}"].copy(),
                               int(ck.extra[f"adam.t.{name}"]))
    losses = [float(v) for v in ck.extra_tensors.get("train.losses", [])]
    return TrainState(ck.cfg, ck.params, adam, loads_rng(ck.extra["train.rng"]),
                      int(ck.extra["train.epoch"]), int(ck.extra["train.step"]), losses)


@dataclass
class OverfitResult:
    losses: list[float]
    psnr: dict[int, float]  # step -> Y-PSNR of the eval-mode reconstruction
    seconds: float


def overfit_single_image(cfg: HpiConfig, hr: np.ndarray, steps: int, lr: float = 3e-4,
                         eval_every: int = 250) -> OverfitResult:
    """Repeatedly fit one full HR image (no crops, no augmentation)."""
    import time

    from .metrics import psnr
    from .model import forward

    state = TrainState.fresh(cfg)
    low = degrade(hr, cfg.scale)
    batch = Batch([low], [hr], [0])
    target = ImagePlane(hr)
    scores: dict[int, float] = {}
    start = time.perf_counter()
    for s in range(1, steps + 1):
        train_step(state, batch, lr)
        if s % eval_every == 0 or s == steps:
            scores[s] = psnr(forward(ImagePlane(low), state.params, cfg), target)
    return OverfitResult(state.losses, scores, time.perf_counter() - start)
