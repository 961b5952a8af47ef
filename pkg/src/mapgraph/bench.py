"""Inference throughput benchmark with a per-stage breakdown.

Runs scenes through the full predictor and reports mean and standard
deviation of the per-scene wall time of each stage.  Stage clocks live
inside the pipeline itself; their sum is compared against the
benchmark's own wall time so unaccounted overhead is visible.
"""

from __future__ import annotations

import time

import numpy as np

from .errors import DataError
from .geometry import MapScene
from .model import Pipeline

STAGES = ("detector", "extract", "gnn", "sinkhorn", "decode")


def run_bench(pipe: Pipeline, scenes: list[MapScene], warmup: int = 5) -> dict:
    """Predict every scene once (after warm-up) and aggregate timings.

    Context construction (rasterization, feature rendering) is data
    preparation and happens before the clock starts.  The first
    ``warmup`` predictions are discarded so one-time allocation costs
    do not skew the stats.
    """
    if not scenes:
        raise DataError("bench needs at least one scene")
    ctxs = [pipe.build_context(s) for s in scenes]
    for ctx in ctxs[: min(warmup, len(ctxs))]:
        pipe.predict(ctx)

    samples: dict[str, list[float]] = {name: [] for name in STAGES}
    n_instances = 0
    t0 = time.perf_counter()
    for ctx in ctxs:
        per_scene: dict[str, float] = {}
        n_instances += len(pipe.predict(ctx, timings=per_scene))
        for name in STAGES:
            samples[name].append(per_scene.get(name, 0.0))
    wall = time.perf_counter() - t0

    stage_total = float(sum(sum(v) for v in samples.values()))
    stages = {}
    for name in STAGES:
        arr = np.asarray(samples[name])
        stages[name] = {
            "mean_ms": round(1e3 * float(arr.mean()), 4),
            "std_ms": round(1e3 * float(arr.std()), 4),
            "share": round(float(arr.sum()) / stage_total, 4) if stage_total > 0 else 0.0,
        }
    return {
        "n_scenes": len(scenes),
        "n_instances": n_instances,
        "wall_ms_total": round(1e3 * wall, 3),
        "mean_ms_per_scene": round(1e3 * wall / len(scenes), 4),
        "stages": stages,
        "stage_sum_over_wall": round(stage_total / wall, 4) if wall > 0 else 0.0,
    }
