"""Turning a soft adjacency into polyline instances.

The adjacency is symmetrized, thresholded, and pruned to mutually
agreeing top-2 neighbours, which bounds every vertex degree by two.
Connected chains are then traced from their endpoints (cycles from
their most confident vertex) and emitted as class-labelled polylines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .geometry import CLASS_INDEX, CLASS_NAMES, BevConfig, GroundTruthRaster

TAU_ADJ_DEFAULT = 0.2


@dataclass
class PredictedInstance:
    points: np.ndarray  # (n, 2) meters
    cls: int
    score: float


def _mutual_top2_edges(sym: np.ndarray, tau: float) -> list[set[int]]:
    """Adjacency lists after mutual top-2 pruning at threshold tau."""
    k = sym.shape[0]
    top2 = []
    for i in range(k):
        order = np.argsort(-sym[i], kind="stable")
        top2.append(set(order[:2].tolist()))
    nbrs: list[set[int]] = [set() for _ in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            if sym[i, j] >= tau and j in top2[i] and i in top2[j]:
                nbrs[i].add(j)
                nbrs[j].add(i)
    return nbrs


def _trace(start: int, nbrs: list[set[int]], sym: np.ndarray, used: np.ndarray) -> list[int]:
    """Walk from start along unused vertices, strongest edge first."""
    chain = [start]
    used[start] = True
    cur = start
    while True:
        cand = [j for j in nbrs[cur] if not used[j]]
        if not cand:
            break
        cand.sort(key=lambda j: (-sym[cur, j], j))
        cur = cand[0]
        used[cur] = True
        chain.append(cur)
    return chain


def decode(
    adj: np.ndarray,
    xy: np.ndarray,
    conf: np.ndarray,
    cls_probs: np.ndarray,
    cfg: BevConfig,
    tau: float = TAU_ADJ_DEFAULT,
) -> list[PredictedInstance]:
    """Decode polyline instances from a (k+1, k+1) adjacency.

    adj includes the dustbin row/column, which is ignored here; xy holds
    the k vertex pixel positions, conf their confidences, cls_probs
    their (k, 3) class probabilities.  Instances with fewer than two
    vertices are dropped.
    """
    k = len(xy)
    if adj.shape != (k + 1, k + 1):
        raise ShapeError(f"adjacency {adj.shape} does not fit {k} vertices")
    if k < 2:
        return []
    a = adj[:k, :k]
    sym = 0.5 * (a + a.T)
    np.fill_diagonal(sym, 0.0)
    nbrs = _mutual_top2_edges(sym, tau)

    used = np.zeros(k, dtype=bool)
    chains: list[list[int]] = []
    # open paths first, from their endpoints in index order
    for i in range(k):
        if not used[i] and len([j for j in nbrs[i] if not used[j]]) == 1:
            chains.append(_trace(i, nbrs, sym, used))
    # what remains with edges is cycles; start at the most confident vertex
    while True:
        rest = [i for i in range(k) if not used[i] and any(not used[j] for j in nbrs[i])]
        if not rest:
            break
        rest.sort(key=lambda i: (-conf[i], i))
        chains.append(_trace(rest[0], nbrs, sym, used))

    out = []
    for chain in chains:
        if len(chain) < 2:
            continue
        idx = np.array(chain, dtype=np.int64)
        votes = np.argmax(cls_probs[idx], axis=1)
        counts = np.bincount(votes, minlength=cls_probs.shape[1])
        best = counts.max()
        tied = np.nonzero(counts == best)[0]
        if len(tied) == 1:
            cls = int(tied[0])
        else:
            sums = cls_probs[idx].sum(axis=0)
            cls = int(tied[np.argmax(sums[tied])])
        out.append(
            PredictedInstance(
                points=cfg.pixels_to_meters(xy[idx]),
                cls=cls,
                score=float(np.mean(conf[idx])),
            )
        )
    return out


def adjacency_from_ground_truth(
    gt: GroundTruthRaster,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Ideal decoder inputs for a rasterized scene.

    Returns (adj, xy, conf, cls_probs): a (k+1, k+1) adjacency with unit
    mass on every chain edge (endpoints feed the dustbin), the k vertex
    pixel positions, unit confidences, and one-hot class probabilities.
    """
    xy = gt.vertex_xy
    k = len(xy)
    adj = np.zeros((k + 1, k + 1), dtype=np.float64)
    cls_probs = np.zeros((k, len(CLASS_NAMES)), dtype=np.float64)
    conf = np.ones(k, dtype=np.float64)
    base = 0
    for e, chain in enumerate(gt.chains):
        n = len(chain)
        for p in range(n):
            cls_probs[base + p, gt.classes[e]] = 1.0
            if p + 1 < n:
                adj[base + p, base + p + 1] = 1.0
                adj[base + p + 1, base + p] = 1.0
        if n:
            adj[base, k] = 1.0
            adj[base + n - 1, k] = 1.0
        base += n
    return adj, xy, conf, cls_probs


def instance_to_dict(inst: PredictedInstance) -> dict:
    return {
        "class": CLASS_NAMES[inst.cls],
        "score": round(float(inst.score), 6),
        "points": [[round(float(x), 4), round(float(y), 4)] for x, y in inst.points],
    }


def instance_from_dict(d: dict) -> PredictedInstance:
    try:
        cls = CLASS_INDEX[d["class"]]
        points = np.asarray(d["points"], dtype=np.float64)
        score = float(d["score"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"bad instance record: {e}") from e
    if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
        raise DataError(f"instance needs (n>=2, 2) points, got {points.shape}")
    return PredictedInstance(points=points, cls=cls, score=score)


def save_predictions(path: str | Path, scene_id: str, instances: list[PredictedInstance]) -> None:
    doc = {"id": scene_id, "instances": [instance_to_dict(i) for i in instances]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_predictions(path: str | Path) -> tuple[str, list[PredictedInstance]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read predictions {path}: {e}") from e
    if not isinstance(doc, dict) or "id" not in doc or "instances" not in doc:
        raise DataError(f"malformed prediction file {path}")
    return str(doc["id"]), [instance_from_dict(d) for d in doc["instances"]]
