"""BEV feature rendering and the two per-cell detector heads.

Both heads are 2-layer MLPs applied independently to each 8x8 patch of
the feature raster: one classifies the patch into 64 sub-cell vertex
positions plus a "no vertex" dustbin, the other regresses the truncated
per-class distance field over the patch.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .geometry import DT_MAX, N_CLASSES, BevConfig, MapScene, class_masks, rasterize_vertex_labels
from .params import ParamStore, mlp2

DETECTOR_HIDDEN = 128
_BLUR_SIZE = 5
_ORACLE_LOGIT = 10.0


def init_detector_params(store: ParamStore, rng: np.random.Generator, cfg: BevConfig, n_channels: int) -> None:
    patch = cfg.cell * cfg.cell * n_channels
    store.linear("det.vertex.0", rng, patch, DETECTOR_HIDDEN)
    store.linear("det.vertex.1", rng, DETECTOR_HIDDEN, cfg.dustbin + 1)
    store.linear("det.dt.0", rng, patch, DETECTOR_HIDDEN)
    store.linear("det.dt.1", rng, DETECTOR_HIDDEN, cfg.cell * cfg.cell * N_CLASSES)


def render_bev_features(
    scene: MapScene,
    cfg: BevConfig,
    n_channels: int = 8,
    noise: float = 0.1,
    seed: int = 0,
) -> np.ndarray:
    """(H, W, C) rasterized input: blurred class masks plus seeded noise.

    Channels 0..2 are the per-class element masks blurred by a small box
    filter (scaled so pixels on an element stay near 1); any remaining
    channels are Gaussian noise of scale ``noise``.
    """
    if n_channels < N_CLASSES:
        raise ShapeError(f"need at least {N_CLASSES} feature channels")
    feats = np.zeros((cfg.h_bev, cfg.w_bev, n_channels))
    masks = class_masks(scene, cfg).astype(np.float64)
    for c in range(N_CLASSES):
        feats[:, :, c] = ndimage.uniform_filter(masks[c] * _BLUR_SIZE, size=_BLUR_SIZE, mode="constant")
    if n_channels > N_CLASSES:
        rng = np.random.default_rng(seed)
        feats[:, :, N_CLASSES:] = rng.normal(scale=noise, size=(cfg.h_bev, cfg.w_bev, n_channels - N_CLASSES))
    return feats


def patch_matrix(features: np.ndarray, cfg: BevConfig) -> np.ndarray:
    """(n_cells, cell*cell*C) view of the raster, cells in row-major order."""
    h, w, c = features.shape
    if h != cfg.h_bev or w != cfg.w_bev:
        raise ShapeError(f"features {features.shape} do not match the {cfg.h_bev}x{cfg.w_bev} grid")
    k = cfg.cell
    return (
        features.reshape(cfg.h_cells, k, cfg.w_cells, k, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(cfg.h_cells * cfg.w_cells, k * k * c)
    )


def vertex_head(
    features: np.ndarray,
    store: ParamStore,
    cfg: BevConfig,
    patches: np.ndarray | None = None,
) -> Tensor:
    """(h_cells, w_cells, 65) vertex logits; channel 64 is the dustbin."""
    if patches is None:
        patches = patch_matrix(features, cfg)
    logits = mlp2(Tensor(patches), store, "det.vertex")
    return ad.reshape(logits, (cfg.h_cells, cfg.w_cells, cfg.dustbin + 1))


def dt_head(
    features: np.ndarray,
    store: ParamStore,
    cfg: BevConfig,
    patches: np.ndarray | None = None,
) -> Tensor:
    """(H, W, 3) predicted distance field, saturated into [0, DT_MAX]."""
    if patches is None:
        patches = patch_matrix(features, cfg)
    raw = mlp2(Tensor(patches), store, "det.dt")
    # ReLU + saturation at the truncation radius
    out = ad.clamp(raw, 0.0, DT_MAX)
    k = cfg.cell
    grid = ad.reshape(out, (cfg.h_cells, cfg.w_cells, k, k, N_CLASSES))
    return ad.reshape(ad.transpose(grid, (0, 2, 1, 3, 4)), (cfg.h_bev, cfg.w_bev, N_CLASSES))


def heatmap_to_confidence(logits: np.ndarray) -> np.ndarray:
    """Channel-wise softmax of (h_cells, w_cells, 65) logits."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def confidence_raster(scores: np.ndarray, cfg: BevConfig) -> np.ndarray:
    """Scatter per-cell sub-pixel scores back onto the full (H, W) grid."""
    k = cfg.cell
    sub = scores[:, :, : cfg.dustbin].reshape(cfg.h_cells, cfg.w_cells, k, k)
    return sub.transpose(0, 2, 1, 3).reshape(cfg.h_bev, cfg.w_bev)


def oracle_heads(
    scene: MapScene,
    cfg: BevConfig,
    flip_prob: float = 0.0,
    dt_noise: float = 0.0,
    seed: int = 0,
    dt_gt: np.ndarray | None = None,
    labels: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth-derived detector outputs with controllable corruption.

    Returns (logits, dt): logits are +-10 one-hot encodings of the GT
    vertex labels, with each cell's label independently re-drawn with
    probability ``flip_prob``; dt is the GT distance field plus clamped
    Gaussian noise of scale ``dt_noise``.
    """
    from .geometry import distance_transform

    rng = np.random.default_rng(seed)
    if labels is None:
        labels = rasterize_vertex_labels(scene, cfg)
    labels = labels.copy()
    n_ch = cfg.dustbin + 1
    if flip_prob > 0.0:
        redraw = rng.random(labels.shape) < flip_prob
        labels[redraw] = rng.integers(0, n_ch, size=int(redraw.sum()))
    logits = np.full(labels.shape + (n_ch,), -_ORACLE_LOGIT)
    hc, wc = labels.shape
    logits[np.arange(hc)[:, None], np.arange(wc)[None, :], labels] = _ORACLE_LOGIT

    if dt_gt is None:
        dt_gt = distance_transform(scene, cfg)
    dt = dt_gt.copy()
    if dt_noise > 0.0:
        dt = np.clip(dt + rng.normal(scale=dt_noise, size=dt.shape), 0.0, DT_MAX)
    return logits, dt
