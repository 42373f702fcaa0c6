import math

import numpy as np
import pytest

from hpinet import attention as A
from hpinet import tensor as T
from helpers import AnchoredStraightThrough, analytic_grads, attention_loop, numeric_grads, rel_err

C = 8


def make_weights(rng, c=C, d=C, hidden=2 * C, heads=1, scale=0.4, as_arrays=False):
    arrays = dict(
        ln_gamma=1 + 0.1 * rng.standard_normal(c), ln_beta=0.1 * rng.standard_normal(c),
        w_q=scale * rng.standard_normal((c, d)), w_k=scale * rng.standard_normal((c, d)),
        w_v=scale * rng.standard_normal((c, c)), w_o=np.eye(c) + 0.1 * rng.standard_normal((c, c)),
        ln2_gamma=1 + 0.1 * rng.standard_normal(c), ln2_beta=0.1 * rng.standard_normal(c),
        w1=scale * rng.standard_normal((c, hidden)), b1=0.1 * rng.standard_normal(hidden),
        w2=scale * rng.standard_normal((hidden, c)), b2=0.1 * rng.standard_normal(c),
    )
    if as_arrays:
        return arrays
    return A.AttentionWeights(**{k: T.Tensor(v) for k, v in arrays.items()}, heads=heads)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def ln_oracle(v, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return np.array([(x - mu) / math.sqrt(var + eps) for x in v])


# --- tokens and similarity -------------------------------------------------------


def test_pool_token_constant_patch_is_zero():
    assert np.all(A.pool_token(T.Tensor(np.full((9, C), 0.7))).data == 0)


@pytest.mark.parametrize("c", [2.0, 10.0])
def test_pool_token_scale_invariant(rng, c):
    # eps breaks exact invariance; keep the pooled variance well above it
    patch = 3 * rng.standard_normal(C) + 0.5 * rng.standard_normal((16, C))
    with T.precision(np.float64):
        a = A.pool_token(T.Tensor(patch)).data
        b = A.pool_token(T.Tensor(c * patch)).data
    assert np.max(np.abs(a - b)) < 1e-5


def test_pool_token_vs_oracle(rng):
    patch = rng.standard_normal((16, C))
    ref = ln_oracle([sum(patch[:, k]) / 16 for k in range(C)])
    with T.precision(np.float64):
        assert np.max(np.abs(A.pool_token(T.Tensor(patch)).data - ref)) < 1e-6


def test_similarity_examples(rng):
    t = rng.standard_normal(C)
    S = A.similarity_map(T.Tensor(np.stack([t, t]))).data
    n2 = float(np.float32(t).astype(np.float32) @ np.float32(t))
    assert S[0, 0] == 0 and S[1, 1] == 0
    assert S[0, 1] == pytest.approx(n2, rel=1e-5) and S[1, 0] == pytest.approx(n2, rel=1e-5)
    ortho = A.similarity_map(T.Tensor(np.eye(3, C))).data
    assert np.all(ortho == 0)


def test_similarity_vs_pairwise_dots(rng):
    tok = rng.standard_normal((4, C))
    with T.precision(np.float64):
        S = A.similarity_map(T.Tensor(tok)).data
    for i in range(4):
        for j in range(4):
            ref = 0.0 if i == j else sum(tok[i, k] * tok[j, k] for k in range(C))
            assert abs(S[i, j] - ref) < 1e-6
    assert np.all(np.diag(S) == 0)


# --- partner selection ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ["hard", "gumbel"])
def test_two_patches_pick_each_other(mode, rng):
    S = A.similarity_map(T.Tensor(rng.standard_normal((2, C))))
    sel = A.select_partner(S, mode, tau=1.0, rng=rng)
    assert sel.indices.tolist() == [1, 0]


def test_hard_tie_goes_to_smallest_index():
    S = T.Tensor(np.array([[0, 3, 3, 1], [3, 0, 1, 1], [3, 1, 0, 2], [1, 1, 2, 0]], dtype=float))
    assert A.select_partner(S).indices[0] == 1


def test_hard_never_selects_self_even_when_all_negative():
    S = T.Tensor(-np.ones((4, 4)) + np.diag(np.ones(4)))
    idx = A.select_partner(S).indices
    assert all(idx[i] != i for i in range(4))


def test_gumbel_rows_exclude_diagonal(rng):
    S = A.similarity_map(T.Tensor(rng.standard_normal((5, C))))
    sel = A.select_partner(S, "gumbel", tau=1.0, rng=rng)
    assert np.all(np.diag(sel.soft.data) == 0)
    np.testing.assert_allclose(sel.soft.data.sum(axis=1), 1, atol=1e-6)
    assert np.all(sel.indices != np.arange(5))
    np.testing.assert_array_equal(sel.weights.data, np.eye(5)[sel.indices])


def test_gumbel_low_temperature_matches_hard(rng):
    agree = total = 0
    for _ in range(1000):
        S = T.Tensor(rng.standard_normal((6, 6)))
        hard = A.select_partner(S).indices
        soft = A.select_partner(S, "gumbel", tau=0.01, rng=rng).indices
        agree += int(np.sum(hard == soft))
        total += 6
    assert agree / total >= 0.99


def test_gumbel_noise_is_row_keyed():
    a = A.gumbel_noise(5, np.random.default_rng(3))
    b = A.gumbel_noise(5, np.random.default_rng(3))
    assert np.array_equal(a, b)
    # Row i depends only on (draw key, i), not on how many rows were drawn.
    c = A.gumbel_noise(3, np.random.default_rng(3))
    assert np.array_equal(a[:3, :3], c[:, :3])


@pytest.mark.parametrize("c", [0.1, 10.0])
def test_selection_invariant_to_token_scaling(rng, c):
    tok = rng.standard_normal((7, C))
    base = A.select_partner(A.similarity_map(T.Tensor(tok))).indices
    scaled = A.select_partner(A.similarity_map(T.Tensor(c * tok))).indices
    assert np.array_equal(base, scaled)


# --- attention sublayers -------------------------------------------------------------


def test_cross_attention_with_self_is_self_attention(rng):
    w = make_weights(rng)
    x = T.Tensor(rng.standard_normal((3, 4, C)))
    x2 = T.Tensor(x.data.copy())
    np.testing.assert_array_equal(A.cross_attention(x, x2, w).data, A.self_attention(x, w).data)


def test_zero_value_path_is_residual(rng):
    w = make_weights(rng)
    w.w_v = T.zeros((C, C))
    x = T.Tensor(rng.standard_normal((2, 4, C)))
    xb = T.Tensor(rng.standard_normal((2, 4, C)))
    np.testing.assert_array_equal(A.cross_attention(x, xb, w).data, x.data)


def test_cross_attention_vs_loop_oracle(rng):
    arr = make_weights(rng, as_arrays=True)
    x, xb = rng.standard_normal((4, C)), rng.standard_normal((4, C))
    ref = attention_loop(x, xb, arr["w_q"], arr["w_k"], arr["w_v"], arr["w_o"], arr["ln_gamma"], arr["ln_beta"])
    with T.precision(np.float64):
        w = A.AttentionWeights(**{k: T.Tensor(v) for k, v in arr.items()})
        out = A.cross_attention(T.Tensor(x), T.Tensor(xb), w).data
    assert np.max(np.abs(out - ref)) < 1e-5


def test_self_attention_vs_loop_oracle(rng):
    arr = make_weights(rng, as_arrays=True)
    x = rng.standard_normal((9, C))
    ref = attention_loop(x, x, arr["w_q"], arr["w_k"], arr["w_v"], arr["w_o"], arr["ln_gamma"], arr["ln_beta"])
    with T.precision(np.float64):
        w = A.AttentionWeights(**{k: T.Tensor(v) for k, v in arr.items()})
        out = A.self_attention(T.Tensor(x), w).data
    assert np.max(np.abs(out - ref)) < 1e-5


def test_single_token_attention(rng):
    arr = make_weights(rng, as_arrays=True)
    x = rng.standard_normal((1, C))
    with T.precision(np.float64):
        w = A.AttentionWeights(**{k: T.Tensor(v) for k, v in arr.items()})
        out = A.self_attention(T.Tensor(x), w).data
        hx = T.layer_norm(T.Tensor(x), w.ln_gamma, w.ln_beta).data
    np.testing.assert_allclose(out, x + (hx @ arr["w_v"]) @ arr["w_o"], atol=1e-12)


def test_self_attention_permutation_equivariant(rng):
    w = make_weights(rng)
    x = rng.standard_normal((16, C))
    perm = rng.permutation(16)
    with T.precision(np.float64):
        w64 = A.AttentionWeights(**{k: T.Tensor(getattr(w, k).data) for k in make_weights(rng, as_arrays=True)})
        out = A.self_attention(T.Tensor(x), w64).data
        out_p = A.self_attention(T.Tensor(x[perm]), w64).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_multi_head_matches_per_head_loop(rng):
    arr = make_weights(rng, as_arrays=True)
    x = rng.standard_normal((5, C))
    heads = 2
    with T.precision(np.float64):
        w = A.AttentionWeights(**{k: T.Tensor(v) for k, v in arr.items()}, heads=heads)
        out = A.self_attention(T.Tensor(x), w).data
        hx = T.layer_norm(T.Tensor(x), w.ln_gamma, w.ln_beta).data
    q, k, v = hx @ arr["w_q"], hx @ arr["w_k"], hx @ arr["w_v"]
    dh, ch = C // heads, C // heads
    parts = []
    for h in range(heads):
        s = q[:, h * dh:(h + 1) * dh] @ k[:, h * dh:(h + 1) * dh].T / math.sqrt(dh)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        parts.append(p @ v[:, h * ch:(h + 1) * ch])
    np.testing.assert_allclose(out, x + np.concatenate(parts, axis=1) @ arr["w_o"], atol=1e-10)


def test_attention_rows_sum_to_one(rng):
    q, k = T.Tensor(rng.standard_normal((3, 9, C))), T.Tensor(rng.standard_normal((3, 9, C)))
    p = A.attention_probs(q, k).data
    assert np.all(np.abs(p.sum(axis=-1) - 1) < 1e-6)


def test_ffn_examples(rng):
    w = make_weights(rng)
    x = T.Tensor(rng.standard_normal((2, 4, C)))
    w.w2 = T.zeros(w.w2.shape)
    np.testing.assert_allclose(A.ffn_sublayer(x, w).data, x.data + w.b2.data, rtol=1e-6)

    w = make_weights(rng)
    w.b1, w.b2, w.ln2_beta = T.zeros(w.b1.shape), T.zeros(C), T.zeros(C)
    np.testing.assert_array_equal(A.ffn_sublayer(T.zeros((4, C)), w).data, np.zeros((4, C)))


def test_ffn_vs_formula_oracle(rng):
    arr = make_weights(rng, as_arrays=True)
    x = rng.standard_normal((6, C))
    ref = np.empty_like(x)
    for r in range(6):
        h = ln_oracle(x[r]) * arr["ln2_gamma"] + arr["ln2_beta"]
        a = h @ arr["w1"] + arr["b1"]
        g = np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in a])
        ref[r] = x[r] + g @ arr["w2"] + arr["b2"]
    with T.precision(np.float64):
        w = A.AttentionWeights(**{k: T.Tensor(v) for k, v in arr.items()})
        out = A.ffn_sublayer(T.Tensor(x), w).data
    assert np.max(np.abs(out - ref)) < 1e-5


# --- GPA ----------------------------------------------------------------------------------


def test_gpa_single_patch_is_identity(rng):
    x = T.Tensor(rng.standard_normal((1, 9, C)))
    res = A.global_pixel_access(x, make_weights(rng), "gumbel", rng=rng)
    assert res.patches is x and res.selection is None


def test_gpa_zero_noise_low_tau_equals_hard(rng):
    w = make_weights(rng)
    x = T.Tensor(rng.standard_normal((6, 9, C)))
    hard = A.global_pixel_access(x, w, "hard").patches.data
    for tau in (1.0, 1e-3):
        soft = A.global_pixel_access(x, w, "gumbel", tau=tau, noise=np.zeros((6, 6))).patches.data
        assert np.max(np.abs(soft - hard)) < 1e-5


def test_gpa_ipsa_stack_gradient_gumbel(rng, monkeypatch):
    n, pp = 4, 4
    arr_g = make_weights(rng, hidden=C, as_arrays=True)
    arr_i = make_weights(rng, hidden=C, as_arrays=True)
    names = sorted(arr_g)
    x0 = rng.standard_normal((n, pp, C))
    noise = np.random.default_rng(5).gumbel(size=(n, n))

    def stack(x, *flat):
        wg = A.AttentionWeights(**dict(zip(names, flat[:len(names)])))
        wi = A.AttentionWeights(**dict(zip(names, flat[len(names):])))
        g = A.global_pixel_access(x, wg, "gumbel", tau=1.0, noise=noise)
        return T.sum(T.gelu(A.ipsa(g.patches, wi)))

    inputs = [x0] + [arr_g[k] for k in names] + [arr_i[k] for k in names]
    analytic = analytic_grads(stack, inputs)

    anchored = AnchoredStraightThrough()
    monkeypatch.setattr(T, "straight_through", anchored.record)
    with T.precision(np.float64):
        stack(*[T.Tensor(a) for a in inputs])
    monkeypatch.setattr(T, "straight_through", anchored.replay)
    numeric = numeric_grads(stack, inputs)
    errs = [rel_err(a, b) for a, b in zip(analytic, numeric)]
    assert max(errs) < 1e-3, errs


def test_gpa_gradient_hard_mode(rng):
    arr = make_weights(rng, as_arrays=True)
    names = sorted(arr)
    x0 = rng.standard_normal((5, 4, C))

    def fn(x, *flat):
        w = A.AttentionWeights(**dict(zip(names, flat)))
        return T.sum(T.gelu(A.global_pixel_access(x, w, "hard").patches))

    inputs = [x0] + [arr[k] for k in names]
    errs = [rel_err(a, b) for a, b in zip(analytic_grads(fn, inputs), numeric_grads(fn, inputs))]
    assert max(errs) < 1e-4, errs
