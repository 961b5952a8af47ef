"""Training loop with periodic instance-AP evaluation.

Writes one JSONL record per optimizer step and per evaluation, a binary
parameter checkpoint, and a final metrics summary.
"""

from __future__ import annotations

import json
import time
import zlib
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evaluate import evaluate_scenes
from .geometry import MapElement, MapScene
from .model import Pipeline, SceneContext

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.jsonl"
METRICS_NAME = "metrics.json"


def augment_scene(
    scene: MapScene, bev, rng: np.random.Generator, jitter: float
) -> tuple[MapScene, int]:
    """Random mirror flips plus a rigid in-range translation.

    The whole scene is flipped about either axis with probability 1/2
    each and shifted by up to ``jitter`` meters, with the shift clamped
    so every point stays inside the perception range.  Returns the new
    scene and a flip code (0..3) so callers can key derived state on it.
    """
    fx = -1.0 if rng.random() < 0.5 else 1.0
    fy = -1.0 if rng.random() < 0.5 else 1.0
    pts = [el.points * np.array([fx, fy]) for el in scene.elements]
    allx = np.concatenate([p[:, 0] for p in pts])
    ally = np.concatenate([p[:, 1] for p in pts])
    dx = rng.uniform(-jitter, jitter)
    dy = rng.uniform(-jitter, jitter)
    dx = float(np.clip(dx, bev.x_range[0] - allx.min(), bev.x_range[1] - allx.max()))
    dy = float(np.clip(dy, bev.y_range[0] - ally.min(), bev.y_range[1] - ally.max()))
    elements = [
        MapElement(cls=el.cls, points=p + np.array([dx, dy]))
        for el, p in zip(scene.elements, pts)
    ]
    code = (fx > 0) | ((fy > 0) << 1)
    return MapScene(id=scene.id, elements=elements), int(code)


def evaluate_pipeline(pipe: Pipeline, ctxs: list[SceneContext]) -> dict:
    """Instance AP of the pipeline's current parameters on given scenes."""
    preds = [pipe.predict(ctx) for ctx in ctxs]
    scenes = [ctx.scene for ctx in ctxs]
    return evaluate_scenes(
        scenes, preds, thresholds=pipe.cfg.ap_thresholds, spacing=pipe.cfg.sample_spacing
    )


def train(
    pipe: Pipeline,
    train_scenes: list[MapScene],
    val_scenes: list[MapScene],
    out_dir: str | Path,
    seed: int = 0,
    max_steps: int | None = None,
    quiet: bool = False,
) -> dict:
    """Optimize the pipeline on train_scenes; returns the final metrics.

    Stops early once the train mAP reaches cfg.early_stop_train_map (if
    that is set above zero); when cfg.early_stop_val_map is also set the
    val mAP must clear it at the same evaluation.  Scene order is a
    seeded shuffle, repeated over epochs; batches of cfg.batch_size
    scenes share one Adam step.  With augmentation on, each visit uses
    an augmented variant with probability cfg.augment_prob and the
    stored scene otherwise, so the canonical layouts stay in the mix.
    """
    cfg = pipe.cfg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = cfg.train_steps if max_steps is None else max_steps
    rng = np.random.default_rng(seed)

    train_ctxs = [pipe.build_context(s) for s in train_scenes]
    val_ctxs = [pipe.build_context(s) for s in val_scenes]

    t_start = time.perf_counter()
    order: list[int] = []
    best_val = 0.0
    train_map = 0.0
    val_map = 0.0
    steps_run = 0
    log_path = out / LOG_NAME
    with open(log_path, "w") as log:
        for step in range(1, steps + 1):
            batch = []
            for _ in range(cfg.batch_size):
                if not order:
                    order = rng.permutation(len(train_ctxs)).tolist()
                i = order.pop()
                if cfg.augment and rng.random() < cfg.augment_prob:
                    aug, flip_code = augment_scene(
                        train_scenes[i], pipe.bev, rng, jitter=cfg.augment_jitter_m
                    )
                    # noise fixed per (scene, flip): geometry varies, the
                    # rendered noise channels do not chase it
                    seed_i = zlib.crc32(f"{aug.id}:{flip_code}".encode())
                    batch.append(pipe.build_context(aug, noise_seed=seed_i))
                else:
                    batch.append(train_ctxs[i])
            values, grads = pipe.loss_and_grads(batch)
            pipe.store.adam_step(
                grads, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps
            )
            steps_run = step
            rec = {
                "step": step,
                "loss_vertex": round(values["vertex"], 6),
                "loss_dt": round(values["dt"], 6),
                "loss_adj": round(values["adj"], 6),
                "loss_cls": round(values["cls"], 6),
                "loss_total": round(values["total"], 6),
            }
            log.write(json.dumps(rec) + "\n")

            stop = False
            if step % cfg.eval_every == 0 or step == steps:
                train_map = evaluate_pipeline(pipe, train_ctxs)["map"]
                val_map = evaluate_pipeline(pipe, val_ctxs)["map"] if val_ctxs else 0.0
                best_val = max(best_val, val_map)
                ev = {
                    "step": step,
                    "train_map": round(train_map, 6),
                    "val_map": round(val_map, 6),
                    "elapsed_s": round(time.perf_counter() - t_start, 3),
                }
                log.write(json.dumps(ev) + "\n")
                log.flush()
                if not quiet:
                    print(
                        f"step {step}: loss {values['total']:.4f} "
                        f"train_map {train_map:.3f} val_map {val_map:.3f}"
                    )
                if cfg.early_stop_train_map > 0 and train_map >= cfg.early_stop_train_map:
                    if cfg.early_stop_val_map <= 0 or val_map >= cfg.early_stop_val_map:
                        stop = True
            if stop:
                break

    pipe.save(out / CHECKPOINT_NAME)
    val_result = evaluate_pipeline(pipe, val_ctxs) if val_ctxs else {"map": 0.0}
    metrics = {
        "steps_run": steps_run,
        "train_map": round(train_map, 6),
        "val_map": round(val_map, 6),
        "best_val_map": round(best_val, 6),
        "final_val": val_result,
        "elapsed_s": round(time.perf_counter() - t_start, 3),
        "n_train": len(train_scenes),
        "n_val": len(val_scenes),
    }
    (out / METRICS_NAME).write_text(json.dumps(metrics, indent=1) + "\n")
    return metrics
