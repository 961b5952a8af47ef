"""Attentional message passing over the vertex graph, scoring, Sinkhorn.

The graph network refines node embeddings with residual multi-head
self-attention blocks; two output heads produce class logits and match
descriptors; pairwise descriptor scores (dustbin-augmented) are
normalized into a soft adjacency by log-domain Sinkhorn iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError
from .geometry import N_CLASSES
from .params import ParamStore, linear, mlp2

DIAG_FILL = -1e4
MASK_FILL = -1e9


def init_matcher_params(
    store: ParamStore,
    rng: np.random.Generator,
    dim: int,
    n_layers: int,
    n_heads: int,
) -> None:
    if dim % n_heads != 0:
        raise ConfigError(f"embed dim {dim} not divisible by {n_heads} heads")
    for layer in range(n_layers):
        for name in ("q", "k", "v", "o"):
            store.linear(f"gnn.{layer}.attn.{name}", rng, dim, dim)
        store.linear(f"gnn.{layer}.mlp.0", rng, 2 * dim, 2 * dim)
        store.linear(f"gnn.{layer}.mlp.1", rng, 2 * dim, dim)
    store.linear("head.cls.0", rng, dim, dim)
    store.linear("head.cls.1", rng, dim, N_CLASSES)
    store.linear("head.match.0", rng, dim, dim)
    store.linear("head.match.1", rng, dim, dim)
    store.add("match.alpha", np.array(1.0))


def _attention(g: Tensor, mask: np.ndarray, store: ParamStore, layer: int, n_heads: int) -> Tensor:
    n, dim = g.shape
    head = dim // n_heads
    q = linear(g, store, f"gnn.{layer}.attn.q")
    k = linear(g, store, f"gnn.{layer}.attn.k")
    v = linear(g, store, f"gnn.{layer}.attn.v")

    def split(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (n, n_heads, head)), (1, 0, 2))

    q, k, v = split(q), split(k), split(v)
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * Tensor(1.0 / np.sqrt(head))
    key_mask = np.where(mask, 0.0, MASK_FILL)[None, None, :]
    attn = ad.softmax(ad.add(scores, Tensor(key_mask)), axis=-1)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (n, dim))
    return linear(mixed, store, f"gnn.{layer}.attn.o")


def message_passing(
    g0: Tensor,
    mask: np.ndarray,
    store: ParamStore,
    n_layers: int,
    n_heads: int,
) -> Tensor:
    """Residual attention refinement; masked rows stay zero at every layer."""
    if not mask.any():
        raise DataError("message passing over an all-masked graph")
    g = g0
    col_mask = Tensor(mask.astype(np.float64)[:, None])
    for layer in range(n_layers):
        msa = _attention(g, mask, store, layer, n_heads)
        delta = mlp2(ad.concat([g, msa], axis=1), store, f"gnn.{layer}.mlp")
        g = ad.mul(ad.add(g, delta), col_mask)
    return g


def matcher_heads(g: Tensor, mask: np.ndarray, store: ParamStore) -> tuple[Tensor, Tensor]:
    """Per-node class logits (N, 3) and match descriptors (N, D)."""
    col_mask = Tensor(mask.astype(np.float64)[:, None])
    cls_logits = ad.mul(mlp2(g, store, "head.cls"), col_mask)
    desc = ad.mul(mlp2(g, store, "head.match"), col_mask)
    return cls_logits, desc


@dataclass
class ScoreMatrix:
    """Dustbin-augmented pairwise scores, (N+1, N+1)."""

    s_bar: Tensor
    n_valid: int
    capacity: int


def score_matrix(
    desc: Tensor,
    mask: np.ndarray,
    store: ParamStore,
    diag_mode: str = "neg",
    score_norm: str = "scaled_dot",
) -> ScoreMatrix:
    """Pairwise descriptor scores with forced diagonal and dustbin row/col.

    The diagonal is forced because an element never links a vertex to
    itself: ``diag_mode="neg"`` (default) writes a large negative score,
    ``"zero"`` reproduces the literal zero-fill variant.  Masked
    rows/columns are filled with a large negative score.  The learnable
    scalar ``match.alpha`` fills the dustbin row and column.
    """
    n, dim = desc.shape
    if diag_mode not in ("neg", "zero"):
        raise ConfigError(f"unknown diag_mode {diag_mode!r}")
    if score_norm not in ("scaled_dot", "cosine"):
        raise ConfigError(f"unknown score_norm {score_norm!r}")
    if score_norm == "cosine":
        norm = ad.sqrt(ad.tsum(ad.mul(desc, desc), axis=1, keepdims=True) + Tensor(1e-12))
        desc = ad.div(desc, norm)
        scale = 1.0
    else:
        scale = 1.0 / np.sqrt(dim)
    s = ad.matmul(desc, ad.transpose(desc, (1, 0))) * Tensor(scale)

    eye = np.eye(n)
    diag_val = 0.0 if diag_mode == "zero" else DIAG_FILL
    s = ad.add(ad.mul(s, Tensor(1.0 - eye)), Tensor(eye * diag_val))

    valid = np.outer(mask, mask).astype(np.float64)
    s = ad.add(ad.mul(s, Tensor(valid)), Tensor((1.0 - valid) * DIAG_FILL))

    alpha = store["match.alpha"]
    col = ad.mul(alpha, Tensor(np.ones((n, 1))))
    row = ad.mul(alpha, Tensor(np.ones((1, n + 1))))
    s_bar = ad.concat([ad.concat([s, col], axis=1), row], axis=0)
    return ScoreMatrix(s_bar=s_bar, n_valid=int(mask.sum()), capacity=n)


@dataclass
class AdjacencyMatrix:
    """Sinkhorn-normalized soft adjacency.

    ``probs`` covers the valid vertices plus the dustbin,
    (n_valid+1, n_valid+1); ``dense()`` scatters it back to the padded
    (capacity+1, capacity+1) layout with zeros at masked slots.
    """

    probs: Tensor
    n_valid: int
    capacity: int

    @property
    def dustbin(self) -> int:
        """Dustbin index within ``probs``."""
        return self.n_valid

    def dense(self) -> np.ndarray:
        out = np.zeros((self.capacity + 1, self.capacity + 1))
        idx = np.concatenate([np.arange(self.n_valid), [self.capacity]])
        out[np.ix_(idx, idx)] = self.probs.data
        return out


def sinkhorn(sm: ScoreMatrix, iters: int = 100) -> AdjacencyMatrix:
    """Log-domain Sinkhorn onto marginals (1, ..., 1, n_valid).

    Every real node row/column must distribute unit mass; the dustbin
    absorbs up to one unit per node.  Runs a fixed number of alternating
    row/column updates on the valid sub-matrix only, so masked slots get
    exactly zero mass.
    """
    k = sm.n_valid
    n = sm.capacity
    if k < 1:
        raise DataError("sinkhorn needs at least one valid vertex")
    if iters < 1:
        raise ConfigError("sinkhorn needs at least one iteration")
    top = ad.concat([sm.s_bar[0:k, 0:k], sm.s_bar[0:k, n : n + 1]], axis=1)
    bottom = ad.concat([sm.s_bar[n : n + 1, 0:k], sm.s_bar[n : n + 1, n : n + 1]], axis=1)
    z = ad.concat([top, bottom], axis=0)

    log_marg = np.zeros(k + 1)
    log_marg[k] = np.log(k)
    log_mu = Tensor(log_marg[:, None])
    log_nu = Tensor(log_marg[None, :])

    u = Tensor(np.zeros((k + 1, 1)))
    v = Tensor(np.zeros((1, k + 1)))
    for _ in range(iters):
        u = ad.sub(log_mu, ad.logsumexp(ad.add(z, v), axis=1, keepdims=True))
        v = ad.sub(log_nu, ad.logsumexp(ad.add(z, u), axis=0, keepdims=True))
    probs = ad.exp(ad.add(ad.add(z, u), v))
    return AdjacencyMatrix(probs=probs, n_valid=k, capacity=n)
