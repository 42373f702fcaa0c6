"""HPINet: encoder, cascaded HPI blocks, pixel-shuffle decoder, LR skip.

Parameters live in an ordered ``name -> Tensor`` dict (:data:`ModelParams`).
Every name the forward pass reads is listed by :func:`param_shapes`, which
also drives initialization, counting and checkpoint validation.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import tensor as T
from .attention import AttentionWeights, global_pixel_access, ipsa
from .config import HpiConfig, parse_model, render
from .errors import FormatError, IntegrityError, UsageError
from .imaging import ImagePlane, bilinear_resize
from .patching import PatchSet, aggregate, cpd_schedule, divide
from .tensor import Tensor

ModelParams = "OrderedDict[str, Tensor]"
Mode = Literal["eval", "train"]

MAGIC = b"HPIN"
FORMAT_VERSION = 1
DTYPE_F32 = 0


def upscale_factors(scale: int) -> list[int]:
    return {1: [], 2: [2], 3: [3], 4: [2, 2]}[scale]


def _attention_shapes(prefix: str, c: int, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.ln.gamma", (c,)), (f"{prefix}.ln.beta", (c,)),
            (f"{prefix}.w_q", (c, d)), (f"{prefix}.w_k", (c, d)),
            (f"{prefix}.w_v", (c, c)), (f"{prefix}.w_o", (c, c))]


def param_shapes(cfg: HpiConfig) -> "OrderedDict[str, tuple[int, ...]]":
    c, d, hid = cfg.channels, cfg.qk_dim, cfg.ffn_hidden
    shapes: list[tuple[str, tuple[int, ...]]] = [("encoder.w", (c, 3, 3, 3)), ("encoder.b", (c,))]
    for k in range(cfg.blocks):
        p = f"block.{k}"
        shapes += _attention_shapes(f"{p}.gpa", c, d)
        shapes += _attention_shapes(f"{p}.ipsa", c, d)
        shapes += [(f"{p}.ipsa.ln2.gamma", (c,)), (f"{p}.ipsa.ln2.beta", (c,)),
                   (f"{p}.ipsa.ffn.w1", (c, hid)), (f"{p}.ipsa.ffn.b1", (hid,)),
                   (f"{p}.ipsa.ffn.w2", (hid, c)), (f"{p}.ipsa.ffn.b2", (c,)),
                   (f"{p}.conv.w", (c, c, 3, 3)), (f"{p}.conv.b", (c,))]
    for i, r in enumerate(upscale_factors(cfg.scale)):
        shapes += [(f"decoder.up.{i}.w", (r * r * c, c, 3, 3)), (f"decoder.up.{i}.b", (r * r * c,))]
    shapes += [("decoder.out.w", (3, c, 3, 3)), ("decoder.out.b", (3,))]
    return OrderedDict(shapes)


def count_params(cfg: HpiConfig) -> int:
    """Closed-form parameter count; must agree with enumerating param_shapes."""
    c, d, hid = cfg.channels, cfg.qk_dim, cfg.ffn_hidden
    attn = 2 * c + 2 * c * d + 2 * c * c
    ffn = 2 * c + c * hid + hid + hid * c + c
    conv = 9 * c * c + c
    per_block = 2 * attn + ffn + conv
    decoder = sum(9 * c * r * r * c + r * r * c for r in upscale_factors(cfg.scale)) + 27 * c + 3
    return 27 * c + c + cfg.blocks * per_block + decoder


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * 9
    return shape[0]


def init_params(cfg: HpiConfig) -> "OrderedDict[str, Tensor]":
    """Deterministic initialization from ``cfg.seed``.

    Weights: uniform(+-1/sqrt(fan_in)). LN gamma 1, beta 0, W_O identity,
    biases zero.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf in ("beta", "b", "b1", "b2"):
            data = np.zeros(shape)
        elif leaf == "w_o":
            data = np.eye(shape[0])
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def zero_residual(params) -> None:
    """Zero the decoder output conv so the model reduces to the bilinear skip."""
    for name in ("decoder.out.w", "decoder.out.b"):
        params[name].data = np.zeros_like(params[name].data)


@dataclass
class BlockTrace:
    """Per-block record of which patch each patch matched."""

    block: int
    patch_size: int
    origins: list[tuple[int, int]]
    partners: np.ndarray | None
    similarity: np.ndarray | None


@dataclass
class ForwardContext:
    mode: Mode = "eval"
    rng: np.random.Generator | None = None
    # Optional fixed Gumbel noise per block index, for tests.
    noise: dict[int, np.ndarray] = field(default_factory=dict)
    trace: list[BlockTrace] | None = None


def hpi_block_forward(x: Tensor, block_index: int, params, cfg: HpiConfig,
                      ctx: ForwardContext | None = None) -> Tensor:
    ctx = ctx or ForwardContext()
    P = cpd_schedule(cfg, block_index)
    ps = divide(x, P)
    prefix = f"block.{block_index}"
    gpa_w = AttentionWeights.from_params(params, f"{prefix}.gpa", cfg.heads, cfg.ln_eps)
    ipsa_w = AttentionWeights.from_params(params, f"{prefix}.ipsa", cfg.heads, cfg.ln_eps)
    sel_mode = "gumbel" if ctx.mode == "train" else "hard"
    g = global_pixel_access(ps.patches, gpa_w, sel_mode, cfg.gumbel_tau, ctx.rng,
                            ctx.noise.get(block_index))
    if ctx.trace is not None:
        partners = sims = None
        if g.selection is not None:
            partners = g.selection.indices
            sims = g.similarity.data[np.arange(len(partners)), partners]
        ctx.trace.append(BlockTrace(block_index, P, ps.layout.origins, partners, sims))
    y = aggregate(PatchSet(ps.layout, ipsa(g.patches, ipsa_w)))
    return T.add(x, T.conv2d_3x3(y, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"]))


def pad_to_min(img: np.ndarray, size: int) -> np.ndarray:
    """Reflect-pad bottom/right so both spatial sides are at least ``size``."""
    _, h, w = img.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if not ph and not pw:
        return img
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode)


def decoder_residual(lr: np.ndarray, params, cfg: HpiConfig, ctx: ForwardContext | None = None) -> Tensor:
    """Everything except the LR skip: encoder, blocks, decoder, crop."""
    ctx = ctx or ForwardContext()
    lr = np.asarray(lr)
    if lr.ndim != 3 or lr.shape[0] != 3:
        raise UsageError(f"model input must be 3 x H x W RGB, got {lr.shape}")
    _, h, w = lr.shape
    s = cfg.scale
    x = T.Tensor(pad_to_min(lr, cfg.max_patch))
    x = T.conv2d_3x3(x, params["encoder.w"], params["encoder.b"])
    for k in range(cfg.blocks):
        x = hpi_block_forward(x, k, params, cfg, ctx)
    for i, r in enumerate(upscale_factors(s)):
        x = T.pixel_shuffle(T.conv2d_3x3(x, params[f"decoder.up.{i}.w"], params[f"decoder.up.{i}.b"]), r)
    x = T.conv2d_3x3(x, params["decoder.out.w"], params["decoder.out.b"])
    if x.shape[1:] != (s * h, s * w):
        x = T.crop(x, s * h, s * w)
    return x


def forward_tensor(lr: np.ndarray, params, cfg: HpiConfig, ctx: ForwardContext | None = None) -> Tensor:
    """Differentiable forward on a ``3 x H x W`` array; returns ``3 x sH x sW``."""
    res = decoder_residual(lr, params, cfg, ctx)
    _, h, w = res.shape
    return T.add(res, bilinear_resize(np.asarray(lr), h, w))


def forward(img: ImagePlane, params, cfg: HpiConfig, mode: Mode = "eval",
            rng: np.random.Generator | None = None) -> ImagePlane:
    if img.space != "RGB" or img.channels != 3:
        raise UsageError("forward needs an RGB image")
    res = decoder_residual(img.data, params, cfg, ForwardContext(mode, rng))
    # The skip is added in float64 so a zero residual reproduces it exactly.
    skip = bilinear_resize(img.data, cfg.scale * img.height, cfg.scale * img.width)
    return ImagePlane(res.data.astype(np.float64) + skip, "RGB")


def trace_matches(img: ImagePlane, params, cfg: HpiConfig) -> list[BlockTrace]:
    """Run an eval-mode forward, recording every block's patch pairing."""
    ctx = ForwardContext("eval", trace=[])
    forward_tensor(img.data, params, cfg, ctx)
    return ctx.trace


# --- checkpoints -------------------------------------------------------------


def _encode_tensor(name: str, data: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(data, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, cfg: HpiConfig, params, extra: dict[str, str] | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Write the binary checkpoint.

    Layout: ``HPIN``, u32 version, u32-length-prefixed UTF-8 key=value config,
    then for each tensor: u16 name length, name, u8 dtype tag, u8 rank,
    rank x u32 dims, row-major little-endian f32 payload.
    """
    tensors = [(n, t.data) for n, t in params.items()]
    tensors += list((extra_tensors or {}).items())
    header = render(cfg) + "".join(f"{k}={v}\n" for k, v in (extra or {}).items())
    header += f"tensors={len(tensors)}\n"
    raw = header.encode("utf-8")
    blob = bytearray(MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(raw)) + raw)
    for name, data in tensors:
        blob += _encode_tensor(name, data)
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


@dataclass
class Checkpoint:
    cfg: HpiConfig
    params: "OrderedDict[str, Tensor]"
    extra: dict[str, str]
    extra_tensors: dict[str, np.ndarray]


def read_checkpoint(path, expect: HpiConfig | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    rd = _Reader(buf)
    if rd.take(4) != MAGIC:
        raise FormatError(f"{path}: not an HPIN checkpoint")
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (hlen,) = rd.unpack("<I")
    try:
        cfg, extra = parse_model(rd.take(hlen).decode("utf-8"))
        n_tensors = int(extra.pop("tensors"))
    except (UnicodeDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad config header ({exc})") from exc
    records = OrderedDict()
    for _ in range(n_tensors):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        dtype, rank = rd.unpack("<BB")
        if dtype != DTYPE_F32:
            raise FormatError(f"{path}: unknown dtype tag {dtype} for {name}")
        dims = rd.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        records[name] = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if rd.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - rd.pos} trailing bytes")

    shapes = param_shapes(cfg)
    if expect is not None:
        want = param_shapes(expect)
        bad = [n for n in want if n not in shapes or shapes[n] != want[n]]
        if bad or len(want) != len(shapes):
            raise IntegrityError(f"{path}: checkpoint dims incompatible with expected config "
                                 f"(first mismatch: {bad[0] if bad else 'parameter set'})")
    params = OrderedDict()
    for name, shape in shapes.items():
        if name not in records:
            raise IntegrityError(f"{path}: missing tensor {name}")
        if records[name].shape != shape:
            raise IntegrityError(f"{path}: {name} has dims {records[name].shape}, config needs {shape}")
        params[name] = Tensor(records.pop(name), requires_grad=True, name=name, dtype=np.float32)
    return Checkpoint(cfg, params, extra, dict(records))


def load_checkpoint(path, expect: HpiConfig | None = None):
    ck = read_checkpoint(path, expect)
    return ck.cfg, ck.params


def params_digest(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


def dumps_rng(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def loads_rng(text: str) -> np.random.Generator:
    state = json.loads(text)
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
