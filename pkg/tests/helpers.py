"""Independent oracles shared by the test modules."""
import numpy as np

from hpinet import tensor as T


def numeric_grads(fn, arrays, h=1e-4, picks=None):
    """Central differences of scalar ``fn(*tensors)`` w.r.t. every array.

    Runs in float64 without a tape, so it shares nothing with the backward
    rules it checks. ``picks`` optionally restricts each array to a set of
    flat indices; the other entries are left at zero.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    with T.precision(np.float64):
        for k, a in enumerate(arrays):
            g = np.zeros_like(a)
            flat = a.reshape(-1)
            for i in (range(flat.size) if picks is None else picks[k]):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn(*[T.Tensor(x) for x in arrays]).item()
                flat[i] = orig - h
                fm = fn(*[T.Tensor(x) for x in arrays]).item()
                flat[i] = orig
                g.reshape(-1)[i] = (fp - fm) / (2 * h)
            out.append(g)
    return out


def analytic_grads(fn, arrays):
    with T.precision(np.float64):
        ts = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        with T.Tape() as tape:
            loss = fn(*ts)
        grads = tape.backward(loss)
        return [grads.get(t, np.zeros_like(t.data)) for t in ts]


def rel_err(a, b):
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def sample_picks(arrays, per_array, rng):
    """Up to ``per_array`` distinct flat indices per array (all if smaller)."""
    return [np.arange(np.size(a)) if np.size(a) <= per_array
            else np.sort(rng.choice(np.size(a), per_array, replace=False)) for a in arrays]


def picked_rel_errs(analytic, numeric, picks):
    return [rel_err(a.reshape(-1)[p], n.reshape(-1)[p]) for a, n, p in zip(analytic, numeric, picks)]


def max_grad_rel_err(fn, arrays, h=1e-4):
    return max(rel_err(a, n) for a, n in zip(analytic_grads(fn, arrays), numeric_grads(fn, arrays, h)))


def conv3x3_loop(x, w, b):
    """Direct 6-loop cross-correlation with zero padding 1, in float64."""
    cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for y in range(h):
            for xx in range(wd):
                acc = float(b[o])
                for i in range(cin):
                    for dy in range(3):
                        for dx in range(3):
                            yy, xs = y + dy - 1, xx + dx - 1
                            if 0 <= yy < h and 0 <= xs < wd:
                                acc += float(w[o, i, dy, dx]) * float(x[i, yy, xs])
                out[o, y, xx] = acc
    return out


def attention_loop(x, xbar, wq, wk, wv, wo, gamma, beta, eps=1e-5):
    """Row-by-row pre-LN cross-attention for one patch, in float64."""
    def ln(m):
        out = np.empty_like(m)
        for r in range(m.shape[0]):
            mu = sum(m[r]) / m.shape[1]
            var = sum((v - mu) ** 2 for v in m[r]) / m.shape[1]
            out[r] = (m[r] - mu) / np.sqrt(var + eps) * gamma + beta
        return out

    hx, hb = ln(x), ln(xbar)
    q, k, v = hx @ wq, hb @ wk, hb @ wv
    d = q.shape[1]
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        scores = [float(q[i] @ k[j]) / np.sqrt(d) for j in range(x.shape[0])]
        m = max(scores)
        e = [np.exp(s - m) for s in scores]
        z = sum(e)
        row = sum((e[j] / z) * v[j] for j in range(x.shape[0]))
        out[i] = x[i] + row @ wo
    return out


class AnchoredStraightThrough:
    """Replacement for ``straight_through`` whose forward value equals the
    one-hot selection at the anchor point and whose derivative is the soft
    path's. Finite differences of it are the straight-through gradient."""

    def __init__(self):
        self.anchors = []
        self.calls = 0

    def record(self, hard, soft):
        self.anchors.append((hard.copy(), soft.data.copy()))
        return T.Tensor(hard, dtype=soft.data.dtype)

    def replay(self, hard, soft):
        h, s0 = self.anchors[self.calls % len(self.anchors)]
        self.calls += 1
        return T.add(T.sub(soft, s0), h)


# Small differentiable programs, one per kernel, with their input dims.
KERNELS = {
    "matmul": (lambda a, b: T.sum(T.mul(T.matmul(a, b), T.Tensor(np.arange(6.0).reshape(3, 2)))),
               [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: T.sum(T.gelu(T.matmul(a, b))), [(2, 3, 4), (4, 2)]),
    "softmax": (lambda x: T.sum(T.mul(T.softmax(x, axis=1), T.Tensor(np.arange(12.0).reshape(3, 4)))),
                [(3, 4)]),
    "masked_softmax": (lambda x: T.sum(T.mul(T.softmax(x, axis=1, mask=np.eye(3, dtype=bool)),
                                             T.Tensor(np.arange(9.0).reshape(3, 3)))), [(3, 3)]),
    "layer_norm": (lambda x, g, b: T.sum(T.mul(T.layer_norm(x, g, b), T.Tensor(np.arange(15.0).reshape(3, 5)))),
                   [(3, 5), (5,), (5,)]),
    "gelu": (lambda x: T.sum(T.gelu(x)), [(4, 3)]),
    "conv2d_3x3": (lambda x, w, b: T.sum(T.gelu(T.conv2d_3x3(x, w, b))), [(2, 4, 5), (3, 2, 3, 3), (3,)]),
    "avg_pool": (lambda x: T.sum(T.gelu(T.avg_pool_spatial(x))), [(6, 4)]),
    "pixel_shuffle": (lambda x: T.sum(T.mul(T.pixel_shuffle(x, 2), T.Tensor(np.arange(32.0).reshape(2, 4, 4)))),
                      [(8, 2, 2)]),
    "pixel_unshuffle": (lambda x: T.sum(T.gelu(T.pixel_unshuffle(x, 2))), [(1, 4, 4)]),
    "add_broadcast": (lambda a, b: T.sum(T.gelu(T.add(a, b))), [(3, 4), (4,)]),
    "mul_broadcast": (lambda a, b: T.sum(T.gelu(T.mul(a, b))), [(2, 3, 4), (1, 4)]),
    "sub": (lambda a, b: T.sum(T.gelu(T.sub(a, b))), [(3,), (3,)]),
    "take": (lambda x: T.sum(T.gelu(T.take(x, np.array([[2, 0], [2, 1]])))), [(3, 4)]),
    "crop": (lambda x: T.sum(T.gelu(T.crop(x, 2, 3))), [(2, 4, 4)]),
    "transpose_reshape": (lambda x: T.sum(T.mul(T.reshape(T.transpose(x, (1, 0, 2)), (3, 8)),
                                               T.Tensor(np.arange(24.0).reshape(3, 8)))), [(2, 3, 4)]),
    "mean": (lambda x: T.sum(T.gelu(T.mean(x, axis=1))), [(3, 4)]),
}
