"""Vertex extraction from detector outputs and initial graph embeddings.

Extraction is non-differentiable (argmax + top-N); the embedding step is
where the tape picks the graph back up.  Vertex slots are padded to a
fixed capacity with a validity mask; valid entries always occupy a
prefix of the arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .geometry import N_CLASSES, BevConfig
from .params import ParamStore, mlp2


@dataclass
class VertexSet:
    """Up to ``capacity`` vertices in confidence order; valid rows first."""

    xy: np.ndarray  # (N, 2) float, pixel (px, py)
    conf: np.ndarray  # (N,)
    mask: np.ndarray  # (N,) bool, True for real vertices (a prefix)
    dt_patches: np.ndarray  # (N, cell, cell, 3) distance-field patch per vertex

    def __post_init__(self):
        n = len(self.xy)
        if not (len(self.conf) == len(self.mask) == len(self.dt_patches) == n):
            raise ShapeError("vertex arrays disagree on capacity")
        k = int(self.mask.sum())
        if not (np.all(self.mask[:k]) and not np.any(self.mask[k:])):
            raise ShapeError("valid vertices must form a prefix")

    @property
    def capacity(self) -> int:
        return len(self.xy)

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def extract_vertices(
    scores: np.ndarray,
    dt_map: np.ndarray,
    cfg: BevConfig,
    capacity: int,
    threshold: float,
) -> VertexSet:
    """Top-``capacity`` vertices from softmaxed heatmap scores.

    A cell contributes a candidate iff its argmax channel is not the
    dustbin and that score is at least ``threshold``.  Candidates keep
    confidence order; ties fall back to row-major cell order.  Each
    vertex carries the distance-field patch of its cell.
    """
    hc, wc, ch = scores.shape
    if (hc, wc) != (cfg.h_cells, cfg.w_cells) or ch != cfg.dustbin + 1:
        raise ShapeError(f"score grid {scores.shape} does not match the config")
    k = cfg.cell
    best = scores.argmax(axis=-1)
    conf = np.take_along_axis(scores, best[:, :, None], axis=-1)[:, :, 0]
    rows, cols = np.nonzero((best != cfg.dustbin) & (conf >= threshold))
    confs = conf[rows, cols]
    order = np.argsort(-confs, kind="stable")[:capacity]  # stable = row-major ties
    rows, cols, confs = rows[order], cols[order], confs[order]
    n = len(rows)

    labels = best[rows, cols]
    dy, dx = labels // k, labels % k
    xy = np.zeros((capacity, 2))
    xy[:n, 0] = cols * k + dx
    xy[:n, 1] = rows * k + dy
    conf_out = np.zeros(capacity)
    conf_out[:n] = confs
    mask = np.zeros(capacity, dtype=bool)
    mask[:n] = True

    patches = dt_map.reshape(cfg.h_cells, k, cfg.w_cells, k, N_CLASSES).transpose(0, 2, 1, 3, 4)
    dt_patches = np.zeros((capacity, k, k, N_CLASSES))
    dt_patches[:n] = patches[rows, cols]
    return VertexSet(xy, conf_out, mask, dt_patches)


def positional_encoding(xy: np.ndarray, cfg: BevConfig, n_bands: int) -> np.ndarray:
    """(n, 4*n_bands) sinusoidal encoding of pixel coordinates.

    Coordinates are normalized to [-1, 1] per axis (pixel centers); for
    each axis and band k the encoding holds sin(2^k pi a), cos(2^k pi a),
    x bands first, then y.
    """
    xy = np.asarray(xy, dtype=np.float64)
    xn = 2.0 * (xy[:, 0] + 0.5) / cfg.w_bev - 1.0
    yn = 2.0 * (xy[:, 1] + 0.5) / cfg.h_bev - 1.0
    freqs = np.pi * (2.0 ** np.arange(n_bands))
    out = np.empty((len(xy), 4 * n_bands))
    for i, a in enumerate((xn, yn)):
        ang = a[:, None] * freqs[None, :]
        out[:, 2 * n_bands * i : 2 * n_bands * i + 2 * n_bands : 2] = np.sin(ang)
        out[:, 2 * n_bands * i + 1 : 2 * n_bands * (i + 1) : 2] = np.cos(ang)
    return out


def init_embed_params(store: ParamStore, rng: np.random.Generator, cfg: BevConfig, n_bands: int, dim: int) -> None:
    store.linear("emb.pe.0", rng, 4 * n_bands, dim)
    store.linear("emb.pe.1", rng, dim, dim)
    store.linear("emb.dt.0", rng, cfg.cell * cfg.cell * N_CLASSES, dim)
    store.linear("emb.dt.1", rng, dim, dim)


def embed(
    vs: VertexSet,
    store: ParamStore,
    cfg: BevConfig,
    n_bands: int,
    disable_pe: bool = False,
    disable_dt: bool = False,
) -> Tensor:
    """(N, D) initial node embeddings; masked rows are exactly zero.

    The full embedding sums a positional-encoding MLP and a DT-patch MLP;
    either branch can be ablated (not both).  DT patches enter as
    constants: detector heads receive no gradient through this path.
    """
    if disable_pe and disable_dt:
        raise ConfigError("cannot disable both embedding branches")
    parts = []
    if not disable_pe:
        gamma = positional_encoding(vs.xy, cfg, n_bands)
        parts.append(mlp2(Tensor(gamma), store, "emb.pe"))
    if not disable_dt:
        flat = vs.dt_patches.reshape(vs.capacity, -1)
        parts.append(mlp2(Tensor(flat), store, "emb.dt"))
    g = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    return ad.mul(g, Tensor(vs.mask.astype(np.float64)[:, None]))
