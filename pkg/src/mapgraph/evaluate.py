"""Instance-level average precision for polyline predictions.

Predictions and ground truth are resampled at a fixed arc-length
spacing, matched greedily in global confidence order under a Chamfer
distance gate, and scored with all-point interpolated precision-recall
per class and distance threshold.
"""

from __future__ import annotations

import numpy as np

from .decode import PredictedInstance
from .errors import ShapeError
from .geometry import CLASS_INDEX, CLASS_NAMES, MapScene, chamfer, resample_polyline

AP_THRESHOLDS = (0.5, 1.0, 1.5)  # meters
SAMPLE_SPACING = 0.15  # meters


def _ap_from_records(records: list[tuple[float, bool]], n_gt: int) -> float:
    """All-point interpolated AP from (confidence, is_tp) records."""
    if n_gt == 0:
        raise ShapeError("AP needs at least one ground-truth instance")
    if not records:
        return 0.0
    flags = np.array([tp for _, tp in records], dtype=np.float64)
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(1.0 - flags)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * envelope))


def evaluate_scenes(
    gt_scenes: list[MapScene],
    predictions: list[list[PredictedInstance]],
    thresholds: tuple[float, ...] = AP_THRESHOLDS,
    spacing: float = SAMPLE_SPACING,
) -> dict:
    """Score per-scene predictions against their ground-truth scenes.

    Returns ap[class][threshold], class_ap[class] (mean over thresholds)
    and map (mean of class_ap over classes present in the ground truth).
    Matching is greedy: predictions in descending confidence order take
    the nearest unmatched same-class, same-scene ground-truth element if
    its Chamfer distance is below the threshold.
    """
    if len(gt_scenes) != len(predictions):
        raise ShapeError(f"{len(gt_scenes)} scenes but {len(predictions)} prediction lists")
    n_classes = len(CLASS_NAMES)
    n_scenes = len(gt_scenes)

    gt_pts: list[list[np.ndarray]] = [[] for _ in range(n_scenes)]
    gt_cls: list[list[int]] = [[] for _ in range(n_scenes)]
    for s, scene in enumerate(gt_scenes):
        for el in scene.elements:
            gt_pts[s].append(resample_polyline(el.points, spacing))
            gt_cls[s].append(CLASS_INDEX[el.cls])
    pred_pts: list[list[np.ndarray]] = [[] for _ in range(n_scenes)]
    for s, insts in enumerate(predictions):
        for inst in insts:
            pred_pts[s].append(resample_polyline(inst.points, spacing))

    # Chamfer from every prediction to every same-class GT in its scene,
    # shared across thresholds.
    dists: list[list[np.ndarray]] = []
    for s, insts in enumerate(predictions):
        row = []
        for p, inst in enumerate(insts):
            d = np.array(
                [
                    chamfer(pred_pts[s][p], g) if c == inst.cls else np.inf
                    for g, c in zip(gt_pts[s], gt_cls[s])
                ]
            )
            row.append(d)
        dists.append(row)

    gt_counts = np.zeros(n_classes, dtype=np.int64)
    for s in range(n_scenes):
        for c in gt_cls[s]:
            gt_counts[c] += 1

    # global confidence order, stable on (scene, instance) for ties
    flat = [
        (predictions[s][p].score, s, p)
        for s in range(n_scenes)
        for p in range(len(predictions[s]))
    ]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))

    ap: dict[str, dict[float, float]] = {name: {} for name in CLASS_NAMES}
    for thr in thresholds:
        taken = [np.zeros(len(gt_cls[s]), dtype=bool) for s in range(n_scenes)]
        records: list[list[tuple[float, bool]]] = [[] for _ in range(n_classes)]
        for score, s, p in flat:
            cls = predictions[s][p].cls
            d = np.where(taken[s], np.inf, dists[s][p])
            g = int(np.argmin(d)) if len(d) else -1
            if g >= 0 and d[g] < thr:
                taken[s][g] = True
                records[cls].append((score, True))
            else:
                records[cls].append((score, False))
        for c, name in enumerate(CLASS_NAMES):
            if gt_counts[c]:
                ap[name][thr] = _ap_from_records(records[c], int(gt_counts[c]))

    class_ap = {
        name: float(np.mean([ap[name][t] for t in thresholds]))
        for c, name in enumerate(CLASS_NAMES)
        if gt_counts[c]
    }
    mean_ap = float(np.mean(list(class_ap.values()))) if class_ap else 0.0
    return {
        "ap": {n: {str(t): v for t, v in d.items()} for n, d in ap.items() if d},
        "class_ap": class_ap,
        "map": mean_ap,
        "n_gt": {name: int(gt_counts[c]) for c, name in enumerate(CLASS_NAMES)},
    }
