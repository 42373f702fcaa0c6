"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable kernel the network needs lives here, each with an
explicit backward rule. Operations record themselves on the innermost active
:class:`Tape` when at least one input requires a gradient; outside a tape
nothing is recorded and the kernels behave as plain numpy functions.

Compute precision is float32 by default. ``with precision(np.float64):``
switches newly created tensors to float64, which is what the gradient and
oracle tests use.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError, UsageError

_dtype_stack: list[type] = [np.float32]
_tape_stack: list["Tape"] = []


def default_dtype():
    return _dtype_stack[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    _dtype_stack.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype_stack.pop()


class Tensor:
    """An n-dimensional array plus a flag saying whether it wants a gradient.

    Equality is identity, so tensors can key the gradient map returned by
    :meth:`Tape.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"tensor with dims {self.dims} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(dims, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(dims, dtype=default_dtype()), requires_grad)


def ones(dims, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(dims, dtype=default_dtype()), requires_grad)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations executed inside are appended in
    execution order, which is already a topological order for replay.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(self, loss)


def op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward result and register its backward rule on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input. Other modules use this to define composite kernels.
    """
    out = Tensor(data, dtype=data.dtype)
    if _tape_stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape_stack[-1].records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse, returning d(loss)/d(t) for every tensor t
    that requires grad and is reachable from ``loss``.

    Leaf tensors (those not produced on the tape) also get ``.grad`` set.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got dims {loss.dims}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    produced: set[int] = set()
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        g = grads.get(id(rec.out))
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(f"backward produced {gi.shape} for input {t.data.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = t
    result = {}
    for key, t in seen.items():
        if not t.requires_grad:
            continue
        g = grads[key].astype(t.data.dtype, copy=False)
        result[t] = g
        if key not in produced:
            t.grad = g
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data + b.data, (a, b),
              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data - b.data, (a, b),
              lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data * b.data, (a, b),
              lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return op(a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
    return op((d * cdf).astype(d.dtype), (x,), lambda g: ((g * (cdf + d * pdf)).astype(d.dtype),))


# --- shape ---------------------------------------------------------------


def reshape(x: Tensor, dims) -> Tensor:
    src = x.shape
    return op(x.data.reshape(dims), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return op(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[index]`` along the first axis, with scatter-add backward."""
    index = np.asarray(index, dtype=np.intp)
    src = x.shape

    def bw(g):
        gx = np.zeros(src, dtype=g.dtype)
        np.add.at(gx, index.reshape(-1), g.reshape((-1,) + src[1:]))
        return (gx,)

    return op(x.data[index], (x,), bw)


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height x width`` window of the last two axes."""
    src = x.shape

    def bw(g):
        gx = np.zeros(src, dtype=g.dtype)
        gx[..., :height, :width] = g
        return (gx,)

    return op(np.ascontiguousarray(x.data[..., :height, :width]), (x,), bw)


# --- reductions -------------------------------------------------------------


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return op(out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / n)


def avg_pool_spatial(x: Tensor) -> Tensor:
    """Mean over the flattened spatial axis of ``[..., P*P, C]``."""
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"avg_pool_spatial needs a non-empty spatial axis, got {x.dims}")
    return mean(x, axis=x.ndim - 2)


# --- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dims {a.dims} x {b.dims} do not agree")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return op(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax. Entries where ``mask`` is True get exactly
    zero probability and zero gradient."""
    z = x.data if mask is None else np.where(mask, -np.inf, x.data)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return op(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``.

    gamma/beta may be omitted for the parameter-free form.
    """
    c = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"layer_norm affine dims {p.dims} do not match {c}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def bw(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        out = [gx]
        if gamma is not None:
            out.append((g * xhat).sum(axis=red))
        if beta is not None:
            out.append(g.sum(axis=red))
        return out

    return op(y.astype(d.dtype, copy=False), inputs, bw)


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation with zero padding 1 on a ``C x H x W`` map."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d_3x3 got input {x.dims} and kernel {w.dims}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d_3x3 bias {b.dims} does not match {w.shape[0]} outputs")
    cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((cin, 9, h, wd), dtype=x.data.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, k] = xp[:, dy:dy + h, dx:dx + wd]
    cols = cols.reshape(cin * 9, h * wd)
    wm = w.data.reshape(cout, cin * 9)
    out = wm @ cols
    if b is not None:
        out = out + b.data[:, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(cout, h * wd)
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ g2).reshape(cin, 9, h, wd)
            gxp = np.zeros((cin, h + 2, wd + 2), dtype=g.dtype)
            for k in range(9):
                dy, dx = divmod(k, 3)
                gxp[:, dy:dy + h, dx:dx + wd] += gcols[:, k]
            gx = gxp[:, 1:-1, 1:-1]
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return op(out.reshape(cout, h, wd), inputs, bw)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``(r*r*C) x H x W -> C x rH x rW``; channel ``c*r*r + i*r + j`` lands
    at offset ``(i, j)`` of each output tile."""
    cr, h, w = x.shape
    if cr % (r * r):
        raise ShapeError(f"pixel_shuffle: {cr} channels not divisible by {r}^2")
    c = cr // (r * r)
    out = x.data.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)

    def bw(g):
        return (g.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(cr, h, w),)

    return op(np.ascontiguousarray(out), (x,), bw)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w)

    def bw(g):
        return (g.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, hr, wr),)

    return op(np.ascontiguousarray(out), (x,), bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; the gradient passes unchanged to ``soft``."""
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through dims {hard.shape} vs {soft.dims}")
    return op(np.asarray(hard, dtype=soft.data.dtype), (soft,), lambda g: (g,))


# --- loss and optimizer --------------------------------------------------------


def l1_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss dims {pred.dims} vs {target.dims}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype)

    def bw(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return op(out, (pred, target), bw)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState, lr: float) -> Tensor:
    """One bias-corrected Adam update. ``param.data`` is replaced (not
    mutated in place) and ``state`` advances by one step."""
    if not (param.shape == np.shape(grad) == state.m.shape == state.v.shape):
        raise ShapeError(f"adam_step dims param {param.dims}, grad {np.shape(grad)}, "
                         f"state {state.m.shape}")
    dt = param.data.dtype.type
    b1, b2 = dt(state.beta1), dt(state.beta2)
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    mhat = state.m / dt(1 - state.beta1 ** state.t)
    vhat = state.v / dt(1 - state.beta2 ** state.t)
    param.data = (param.data - dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))).astype(param.data.dtype)
    return param
