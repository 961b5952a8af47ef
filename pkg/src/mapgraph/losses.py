"""Training losses and the prediction-to-ground-truth pairing.

Vertex and distance-field losses supervise the detector heads; the
adjacency and class losses supervise the graph matcher through the
Sinkhorn output.  The pairing between predicted and ground-truth
vertices is a greedy nearest-first assignment under a distance gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .extraction import VertexSet
from .geometry import GroundTruthRaster
from .matcher import AdjacencyMatrix

LOG_CLAMP = 1e-12
D0_DEFAULT = 4.0  # pairing gate, pixels


def vertex_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean 65-way cross-entropy between cell logits and GT labels."""
    hc, wc, ch = logits.shape
    if labels.shape != (hc, wc):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    flat = ad.reshape(logits, (hc * wc, ch))
    lsm = ad.log_softmax(flat, axis=1)
    picked = ad.gather2d(lsm, np.arange(hc * wc), labels.reshape(-1))
    return ad.neg(ad.tmean(picked))


def dt_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean squared error over all pixels and channels."""
    if pred.shape != gt.shape:
        raise ShapeError(f"dt shapes differ: {pred.shape} vs {gt.shape}")
    d = ad.sub(pred, Tensor(gt))
    return ad.tmean(ad.mul(d, d))


@dataclass
class GtPairing:
    """Greedy vertex assignment plus derived adjacency supervision.

    ``forward``/``backward`` hold (row, col) index pairs into the valid
    sub-adjacency, where column ``n_valid`` is the dustbin: interior
    vertices pair with their chain neighbours, chain endpoints pair with
    the dustbin on their open side, unassigned predictions pair with the
    dustbin both ways.
    """

    sigma: np.ndarray  # (n_valid,) GT vertex index or -1
    class_targets: np.ndarray  # (n_valid,) class of the matched GT element or -1
    forward: list[tuple[int, int]] = field(default_factory=list)
    backward: list[tuple[int, int]] = field(default_factory=list)
    n_gt: int = 0
    total_distance: float = 0.0


def match_gt(vs: VertexSet, gt: GroundTruthRaster, d0: float = D0_DEFAULT) -> GtPairing:
    """Pair predicted vertices with GT vertices, nearest pair first.

    Candidate pairs closer than ``d0`` pixels are accepted greedily in
    order of (distance, prediction index, GT index); each side is used
    at most once.
    """
    k = vs.count
    gt_xy = []
    elem_of = []
    pos_of = []
    for e, chain in enumerate(gt.chains):
        for p, v in enumerate(chain):
            gt_xy.append(v)
            elem_of.append(e)
            pos_of.append(p)
    n_gt = len(gt_xy)
    sigma = np.full(k, -1, dtype=np.int64)
    class_targets = np.full(k, -1, dtype=np.int64)
    pairing = GtPairing(sigma=sigma, class_targets=class_targets, n_gt=n_gt)
    dust = k

    if k and n_gt:
        gt_arr = np.asarray(gt_xy, dtype=np.float64)
        dists = cdist(vs.xy[:k], gt_arr)
        pi, gi = np.nonzero(dists < d0)
        dv = dists[pi, gi]
        order = np.lexsort((gi, pi, dv))
        taken_gt = np.zeros(n_gt, dtype=bool)
        for idx in order:
            i, g = pi[idx], gi[idx]
            if sigma[i] >= 0 or taken_gt[g]:
                continue
            sigma[i] = g
            taken_gt[g] = True
            pairing.total_distance += dv[idx]

    pred_of_gt = np.full(n_gt, -1, dtype=np.int64)
    for i in range(k):
        if sigma[i] >= 0:
            pred_of_gt[sigma[i]] = i

    chain_len = [len(c) for c in gt.chains]
    for i in range(k):
        g = sigma[i]
        if g < 0:
            pairing.forward.append((i, dust))
            pairing.backward.append((i, dust))
            continue
        e, p = elem_of[g], pos_of[g]
        class_targets[i] = gt.classes[e]
        base = g - p  # index of the chain's first vertex in the flat list
        if p + 1 < chain_len[e]:
            nxt = pred_of_gt[base + p + 1]
            if nxt >= 0:
                pairing.forward.append((i, nxt))
            # detection gap: successor exists but was not matched
        else:
            pairing.forward.append((i, dust))
        if p > 0:
            prv = pred_of_gt[base + p - 1]
            if prv >= 0:
                pairing.backward.append((i, prv))
        else:
            pairing.backward.append((i, dust))
    return pairing


def adjacency_loss(adj: AdjacencyMatrix, pairing: GtPairing) -> Tensor:
    """Negative log-likelihood of the supervised adjacency entries.

    Sum form: -(sum over forward pairs + sum over backward pairs) / 2,
    with probabilities clamped at 1e-12 before the log.
    """
    pairs = pairing.forward + pairing.backward
    if not pairs:
        return Tensor(0.0)
    rows = np.array([p[0] for p in pairs], dtype=np.int64)
    cols = np.array([p[1] for p in pairs], dtype=np.int64)
    picked = ad.gather2d(ad.log(ad.clamp(adj.probs, lo=LOG_CLAMP)), rows, cols)
    return ad.mul(ad.neg(ad.tsum(picked)), Tensor(0.5))


def class_loss(cls_logits: Tensor, pairing: GtPairing) -> Tensor:
    """Mean NLL of the matched predictions' classes; 0 with no matches."""
    matched = np.nonzero(pairing.sigma >= 0)[0]
    if len(matched) == 0:
        return Tensor(0.0)
    lsm = ad.log_softmax(cls_logits, axis=1)
    picked = ad.gather2d(lsm, matched, pairing.class_targets[matched])
    return ad.neg(ad.tmean(picked))


def total_loss(
    l_vertex: Tensor,
    l_dt: Tensor,
    l_adj: Tensor,
    l_cls: Tensor,
    weights: tuple[float, float, float, float],
) -> Tensor:
    """Weighted sum of the four parts."""
    w1, w2, w3, w4 = weights
    out = ad.mul(l_vertex, Tensor(w1))
    out = ad.add(out, ad.mul(l_dt, Tensor(w2)))
    out = ad.add(out, ad.mul(l_adj, Tensor(w3)))
    return ad.add(out, ad.mul(l_cls, Tensor(w4)))
