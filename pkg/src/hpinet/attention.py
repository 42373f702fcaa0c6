"""Global Pixel Access and Intra-Patch Self-Attention.

All functions take patches stacked as ``N x P*P x C`` and apply the same
weights to every patch. GPA pools each patch to a layer-normalized token,
picks for every patch its most similar *other* patch, and lets the patch
attend to that partner. IPSA is plain pre-LN self-attention plus FFN inside
each patch, with no positional embedding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

Mode = Literal["hard", "gumbel"]


@dataclass
class AttentionWeights:
    ln_gamma: Tensor
    ln_beta: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    # FFN sublayer; left as None for the GPA cross-attention.
    ln2_gamma: Tensor | None = None
    ln2_beta: Tensor | None = None
    w1: Tensor | None = None
    b1: Tensor | None = None
    w2: Tensor | None = None
    b2: Tensor | None = None
    heads: int = 1
    eps: float = 1e-5

    @classmethod
    def from_params(cls, params: dict[str, Tensor], prefix: str, heads: int = 1,
                    eps: float = 1e-5) -> "AttentionWeights":
        def get(name):
            return params.get(f"{prefix}.{name}")

        return cls(get("ln.gamma"), get("ln.beta"), get("w_q"), get("w_k"), get("w_v"), get("w_o"),
                   get("ln2.gamma"), get("ln2.beta"), get("ffn.w1"), get("ffn.b1"),
                   get("ffn.w2"), get("ffn.b2"), heads=heads, eps=eps)


@dataclass
class PartnerSelection:
    mode: Mode
    indices: np.ndarray  # forward-pass partner of each patch
    weights: Tensor | None = None  # N x N straight-through matrix (gumbel only)
    soft: Tensor | None = None  # relaxed weights carrying the gradient (gumbel only)


def pool_token(patches: Tensor, eps: float = 1e-5) -> Tensor:
    """Spatial mean followed by parameter-free layer norm over channels."""
    return T.layer_norm(T.avg_pool_spatial(patches), eps=eps)


def similarity_map(tokens: Tensor) -> Tensor:
    """Pairwise token inner products with the diagonal forced to exactly 0."""
    n = tokens.shape[0]
    off_diag = 1.0 - np.eye(n, dtype=tokens.data.dtype)
    return T.mul(T.matmul(tokens, T.swap_last(tokens)), off_diag)


def gumbel_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n x n`` standard Gumbel noise, one independent stream per row.

    Each row is drawn from a generator keyed by (draw, row index), so the
    result does not depend on how rows are scheduled.
    """
    key = int(rng.integers(0, 2**63 - 1))
    return np.stack([np.random.default_rng([key, i]).gumbel(size=n) for i in range(n)])


def _masked_argmax(z: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the smallest index.
    z = np.where(np.eye(z.shape[0], dtype=bool), -np.inf, z)
    return np.argmax(z, axis=1)


def select_partner(S: Tensor, mode: Mode = "hard", tau: float = 1.0,
                   rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None) -> PartnerSelection:
    """Pick one partner j != i per row of the similarity map.

    Gumbel mode perturbs the tempered logits ``S / tau`` with Gumbel noise.
    The forward pass uses the one-hot argmax of the perturbed logits; the
    backward pass flows through their masked softmax. As tau shrinks the
    selection converges to the hard argmax.
    """
    n = S.shape[0]
    if n < 2:
        raise ShapeError("partner selection needs at least two patches")
    if mode == "hard":
        return PartnerSelection("hard", _masked_argmax(S.data))
    if mode != "gumbel":
        raise ValueError(f"unknown selection mode {mode!r}")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel selection needs an rng or explicit noise")
        noise = gumbel_noise(n, rng)
    logits = T.add(T.scale(S, 1.0 / tau), noise)
    eye = np.eye(n, dtype=bool)
    soft = T.softmax(logits, axis=1, mask=eye)
    idx = _masked_argmax(logits.data)
    hard = np.zeros((n, n), dtype=S.data.dtype)
    hard[np.arange(n), idx] = 1
    return PartnerSelection("gumbel", idx, T.straight_through(hard, soft), soft)


def gather_partners(patches: Tensor, sel: PartnerSelection) -> Tensor:
    if sel.weights is None:
        return T.take(patches, sel.indices)
    n, pp, c = patches.shape
    flat = T.reshape(patches, (n, pp * c))
    return T.reshape(T.matmul(sel.weights, flat), (n, pp, c))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, pp, d = x.shape
    return T.transpose(T.reshape(x, (n, pp, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, pp, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, pp, h * d))


def attention_probs(q: Tensor, k: Tensor) -> Tensor:
    return T.softmax(T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(q.shape[-1])), axis=-1)


def cross_attention(x: Tensor, xbar: Tensor, w: AttentionWeights) -> Tensor:
    """``x + W_O softmax(Q K^T / sqrt(d)) V`` with Q from LN(x), K and V from LN(xbar)."""
    if x.shape != xbar.shape:
        raise ShapeError(f"cross_attention dims {x.dims} vs {xbar.dims}")
    if x.ndim == 2:
        return T.reshape(cross_attention(T.reshape(x, (1,) + x.shape),
                                         T.reshape(xbar, (1,) + xbar.shape), w), x.shape)
    hx = T.layer_norm(x, w.ln_gamma, w.ln_beta, w.eps)
    hb = hx if xbar is x else T.layer_norm(xbar, w.ln_gamma, w.ln_beta, w.eps)
    q, k, v = T.matmul(hx, w.w_q), T.matmul(hb, w.w_k), T.matmul(hb, w.w_v)
    if w.heads > 1:
        q, k, v = (_split_heads(t, w.heads) for t in (q, k, v))
        out = _merge_heads(T.matmul(attention_probs(q, k), v))
    else:
        out = T.matmul(attention_probs(q, k), v)
    return T.add(x, T.matmul(out, w.w_o))


def self_attention(x: Tensor, w: AttentionWeights) -> Tensor:
    return cross_attention(x, x, w)


def ffn_sublayer(x: Tensor, w: AttentionWeights) -> Tensor:
    if w.w1 is None or x.shape[-1] != w.w1.shape[0]:
        raise ShapeError(f"ffn_sublayer input {x.dims} does not match FFN weights")
    h = T.layer_norm(x, w.ln2_gamma, w.ln2_beta, w.eps)
    h = T.gelu(T.add(T.matmul(h, w.w1), w.b1))
    return T.add(x, T.add(T.matmul(h, w.w2), w.b2))


def ipsa(patches: Tensor, w: AttentionWeights) -> Tensor:
    return ffn_sublayer(self_attention(patches, w), w)


@dataclass
class GpaResult:
    patches: Tensor
    similarity: Tensor | None
    selection: PartnerSelection | None


def global_pixel_access(patches: Tensor, w: AttentionWeights, mode: Mode = "hard",
                        tau: float = 1.0, rng: np.random.Generator | None = None,
                        noise: np.ndarray | None = None) -> GpaResult:
    """Cross-attend every patch to its best-matching other patch.

    With a single patch there is no valid partner and the input passes
    through unchanged.
    """
    if patches.shape[0] < 2:
        return GpaResult(patches, None, None)
    S = similarity_map(pool_token(patches, w.eps))
    sel = select_partner(S, mode, tau, rng, noise)
    out = cross_attention(patches, gather_partners(patches, sel), w)
    return GpaResult(out, S, sel)
