"""Graph attention, score matrix construction, and Sinkhorn."""

import numpy as np
import pytest

from mapgraph import autodiff as ad
from mapgraph.autodiff import Tape, Tensor
from mapgraph.errors import ConfigError, DataError
from mapgraph.matcher import (
    DIAG_FILL,
    AdjacencyMatrix,
    ScoreMatrix,
    _attention,
    init_matcher_params,
    matcher_heads,
    message_passing,
    score_matrix,
    sinkhorn,
)
from mapgraph.params import ParamStore


def make_store(dim=8, layers=2, heads=2, seed=0):
    store = ParamStore()
    init_matcher_params(store, np.random.default_rng(seed), dim, layers, heads)
    return store


def masked_g(rng, n_valid, capacity, dim):
    g = np.zeros((capacity, dim))
    g[:n_valid] = rng.normal(size=(n_valid, dim))
    mask = np.zeros(capacity, dtype=bool)
    mask[:n_valid] = True
    return Tensor(g), mask


def test_zero_mlp_is_identity():
    store = make_store()
    for layer in range(2):
        store[f"gnn.{layer}.mlp.0.w"].data[...] = 0.0
        store[f"gnn.{layer}.mlp.0.b"].data[...] = 0.0
        store[f"gnn.{layer}.mlp.1.w"].data[...] = 0.0
        store[f"gnn.{layer}.mlp.1.b"].data[...] = 0.0
    g0, mask = masked_g(np.random.default_rng(1), 4, 6, 8)
    g = message_passing(g0, mask, store, n_layers=2, n_heads=2)
    assert np.allclose(g.data, g0.data)


def test_attention_hand_example():
    """1 head, 2 nodes, identity projections: plain softmax mixing."""
    store = ParamStore()
    init_matcher_params(store, np.random.default_rng(0), dim=2, n_layers=1, n_heads=1)
    for name in ("q", "k", "v", "o"):
        store[f"gnn.0.attn.{name}.w"].data[...] = np.eye(2)
        store[f"gnn.0.attn.{name}.b"].data[...] = 0.0
    g = np.array([[1.0, 0.0], [0.0, 2.0]])
    out = _attention(Tensor(g), np.array([True, True]), store, layer=0, n_heads=1)
    scores = g @ g.T / np.sqrt(2)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    assert np.allclose(out.data, attn @ g, atol=1e-12)


def test_masked_padding_is_no_op():
    """Extra padded slots change nothing about the valid computation."""
    store = make_store(dim=8, layers=2, heads=2, seed=3)
    rng = np.random.default_rng(4)
    vals = rng.normal(size=(5, 8))

    outs = []
    for capacity in (5, 9):
        g0 = np.zeros((capacity, 8))
        g0[:5] = vals
        mask = np.zeros(capacity, dtype=bool)
        mask[:5] = True
        g = message_passing(Tensor(g0), mask, store, n_layers=2, n_heads=2)
        cls_logits, desc = matcher_heads(g, mask, store)
        adj = sinkhorn(score_matrix(desc, mask, store), iters=50)
        outs.append((g.data[:5], cls_logits.data[:5], adj.probs.data))
    for a, b in zip(*outs):
        assert np.allclose(a, b, atol=1e-12)


def test_score_matrix_structure():
    store = make_store(dim=2)
    store["match.alpha"].data[...] = 0.7
    desc = Tensor(np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]))
    mask = np.array([True, True, False])
    sm = score_matrix(desc, mask, store)
    s = sm.s_bar.data
    assert s.shape == (4, 4)
    assert sm.n_valid == 2
    # scaled dot product between valid nodes 0 and 1
    assert np.isclose(s[0, 1], 0.0)
    assert np.isclose(s[1, 0], s[0, 1])
    # forced diagonal, masked fill, dustbin value
    assert s[0, 0] == DIAG_FILL and s[1, 1] == DIAG_FILL
    assert s[2, 0] == DIAG_FILL and s[0, 2] == DIAG_FILL
    assert np.all(s[3, :] == 0.7) and np.all(s[:, 3] == 0.7)


def test_score_matrix_scaled_dot_value():
    store = make_store(dim=4)
    d = np.zeros((2, 4))
    d[0] = [1.0, 2.0, 0.0, 0.0]
    d[1] = [3.0, 1.0, 0.0, 0.0]
    sm = score_matrix(Tensor(d), np.ones(2, dtype=bool), store)
    assert np.isclose(sm.s_bar.data[0, 1], (1 * 3 + 2 * 1) / np.sqrt(4))


def test_score_matrix_cosine_bounds():
    store = make_store(dim=6)
    rng = np.random.default_rng(5)
    desc = Tensor(rng.normal(size=(5, 6)) * 10.0)
    sm = score_matrix(desc, np.ones(5, dtype=bool), store, score_norm="cosine")
    off = sm.s_bar.data[:5, :5][~np.eye(5, dtype=bool)]
    assert np.all(np.abs(off) <= 1.0 + 1e-9)


def test_sinkhorn_marginals_random():
    store = make_store(dim=8)
    rng = np.random.default_rng(6)
    for k in (3, 8):
        g0, mask = masked_g(rng, k, k + 2, 8)
        desc = matcher_heads(message_passing(g0, mask, store, 2, 2), mask, store)[1]
        adj = sinkhorn(score_matrix(desc, mask, store), iters=100)
        p = adj.probs.data
        assert p.shape == (k + 1, k + 1)
        assert np.all(p >= 0)
        # every entry touching a real node is a (sub-)probability; the
        # dustbin corner alone may hold up to k mass
        assert np.all(p[:k] <= 1 + 1e-12) and np.all(p[:, :k] <= 1 + 1e-12)
        assert p[k, k] <= k + 1e-12
        assert np.allclose(p[:k].sum(axis=1), 1.0, atol=1e-9)
        assert np.allclose(p[:, :k].sum(axis=0), 1.0, atol=1e-9)
        assert np.isclose(p[k].sum(), k, atol=1e-9)
        assert np.isclose(p[:, k].sum(), k, atol=1e-9)


def test_sinkhorn_matches_probability_domain_oracle():
    """Log-domain result equals classic ratio normalization on a 3x3 case."""
    z = np.array([[0.3, -1.2, 0.5], [1.1, 0.4, -0.7], [0.0, 0.9, 0.2]])
    k = 2
    marg = np.array([1.0, 1.0, float(k)])
    K = np.exp(z)
    r = np.ones(3)
    c = np.ones(3)
    for _ in range(100):
        r = marg / (K @ c)
        c = marg / (K.T @ r)
    oracle = r[:, None] * K * c[None, :]

    sm = ScoreMatrix(s_bar=Tensor(z), n_valid=k, capacity=k)
    p = sinkhorn(sm, iters=100).probs.data
    assert np.allclose(p, oracle, atol=1e-9)


def test_sinkhorn_symmetric_input_symmetric_output():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 5))
    z = 0.5 * (a + a.T)
    sm = ScoreMatrix(s_bar=Tensor(z), n_valid=4, capacity=4)
    p = sinkhorn(sm, iters=100).probs.data
    assert np.allclose(p, p.T, atol=1e-9)


def test_sinkhorn_extreme_scores_stable():
    rng = np.random.default_rng(8)
    z = rng.uniform(-50, 50, size=(7, 7))
    sm = ScoreMatrix(s_bar=Tensor(z), n_valid=6, capacity=6)
    p = sinkhorn(sm, iters=100).probs.data
    assert np.all(np.isfinite(p))
    assert np.all(p >= 0) and np.all(p[:6] <= 1 + 1e-9)
    # the trailing column update makes column marginals exact; rows may
    # still be converging for scores this far apart
    assert np.allclose(p[:, :6].sum(axis=0), 1.0, atol=1e-9)
    assert np.allclose(p[:6].sum(axis=1), 1.0, atol=0.05)


def test_sinkhorn_single_vertex_closed_form():
    """k=1: the 2x2 system has an explicit solution."""
    store = make_store(dim=4)
    desc = Tensor(np.array([[0.5, -0.2, 0.1, 0.0], [0.0] * 4]))
    mask = np.array([True, False])

    store["match.alpha"].data[...] = 0.0
    p = sinkhorn(score_matrix(desc, mask, store, diag_mode="zero"), iters=100).probs.data
    assert np.allclose(p, 0.5, atol=1e-12)

    store["match.alpha"].data[...] = 1.0
    p = sinkhorn(score_matrix(desc, mask, store, diag_mode="zero"), iters=200).probs.data
    expect = 1.0 / (1.0 + np.exp(0.5))
    assert np.isclose(p[0, 0], expect, atol=1e-9)
    assert np.isclose(p[0, 1], 1 - expect, atol=1e-9)


def test_diag_neg_kills_self_mass():
    store = make_store(dim=8, seed=9)
    g0, mask = masked_g(np.random.default_rng(10), 6, 6, 8)
    desc = matcher_heads(message_passing(g0, mask, store, 2, 2), mask, store)[1]
    p = sinkhorn(score_matrix(desc, mask, store, diag_mode="neg"), iters=100).probs.data
    assert np.all(np.diag(p)[:6] < 1e-3)


def test_permutation_equivariance():
    store = make_store(dim=8, layers=2, heads=4, seed=11)
    rng = np.random.default_rng(12)
    k, cap = 5, 7
    g0, mask = masked_g(rng, k, cap, 8)
    perm = rng.permutation(k)

    g_perm = g0.data.copy()
    g_perm[:k] = g0.data[perm]

    def run(g_arr):
        g = message_passing(Tensor(g_arr), mask, store, 2, 4)
        cls_logits, desc = matcher_heads(g, mask, store)
        adj = sinkhorn(score_matrix(desc, mask, store), iters=60)
        return cls_logits.data, adj.probs.data

    cls_a, p_a = run(g0.data)
    cls_b, p_b = run(g_perm)
    assert np.allclose(cls_b[:k], cls_a[perm], atol=1e-9)
    ext = np.concatenate([perm, [k]])  # dustbin stays put
    assert np.allclose(p_b, p_a[np.ix_(ext, ext)], atol=1e-9)


def test_matcher_gradients_match_finite_differences():
    store = make_store(dim=4, layers=1, heads=2, seed=13)
    rng = np.random.default_rng(14)
    g0, mask = masked_g(rng, 3, 4, 4)
    w_adj = rng.normal(size=(4, 4))
    w_cls = rng.normal(size=(4, 3))

    def f():
        g = message_passing(g0, mask, store, 1, 2)
        cls_logits, desc = matcher_heads(g, mask, store)
        adj = sinkhorn(score_matrix(desc, mask, store), iters=25)
        a = ad.tsum(ad.mul(adj.probs, Tensor(w_adj)))
        b = ad.tsum(ad.mul(cls_logits, Tensor(w_cls)))
        return ad.add(a, b)

    err = ad.grad_check(f, store, samples_per_param=4, rng=np.random.default_rng(15))
    assert err < 1e-4


def test_matcher_rejects_bad_input():
    store = make_store()
    g0, _ = masked_g(np.random.default_rng(16), 3, 5, 8)
    with pytest.raises(DataError):
        message_passing(g0, np.zeros(5, dtype=bool), store, 2, 2)
    desc = Tensor(np.zeros((3, 8)))
    sm = score_matrix(desc, np.ones(3, dtype=bool), store)
    with pytest.raises(ConfigError):
        sinkhorn(sm, iters=0)
    empty = score_matrix(desc, np.zeros(3, dtype=bool), store)
    with pytest.raises(DataError):
        sinkhorn(empty)
    with pytest.raises(ConfigError):
        init_matcher_params(ParamStore(), np.random.default_rng(0), dim=6, n_layers=1, n_heads=4)
    with pytest.raises(ConfigError):
        score_matrix(desc, np.ones(3, dtype=bool), store, diag_mode="bogus")
