"""Command line interface.

Subcommands: gen-data, train, infer, eval, render, bench, gradcheck.
Every command is deterministic given (config, seed, inputs), exits 0 on
success, and on failure prints one line ``error:<category>: <message>``
to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .bench import run_bench
from .config import RunConfig, load_config, save_config
from .decode import load_predictions, save_predictions
from .errors import ConfigError, DataError, MapGraphError, NumericError
from .evaluate import evaluate_scenes
from .geometry import MapScene
from .gradcheck import run_all as run_gradcheck
from .model import Pipeline
from .render import render_instances, render_scene, save_svg
from .synth import GenParams, generate_dataset, load_dataset, load_scene, synth_scene
from .train import train as run_train

ABLATIONS = {
    "disable-pe": {"disable_pe": True},
    "disable-dt-embedding": {"disable_dt_embed": True},
    "diag-literal": {"diag_mode": "zero"},
    "oracle-detector": {"oracle_detector": True},
}


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        if getattr(args, "profile", None):
            raise ConfigError("pass either --config or --profile, not both")
        cfg = load_config(args.config)
    elif getattr(args, "profile", None) == "desk":
        cfg = RunConfig.desk()
    else:
        cfg = RunConfig()
    overrides = ABLATIONS.get(getattr(args, "ablate", None) or "")
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _load_scenes_arg(path_str: str) -> list[MapScene]:
    """A --scenes argument: dataset directory (manifest) or one scene file."""
    path = Path(path_str)
    if path.is_dir():
        tr, va = load_dataset(path)
        return tr + va
    return [load_scene(path)]


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=1)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    generate_dataset(cfg.bev(), args.out, count=args.count, base_seed=args.seed,
                     gp=GenParams())
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, train_steps=args.steps)
    train_scenes, val_scenes = load_dataset(args.scenes)
    pipe = Pipeline(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    metrics = run_train(pipe, train_scenes, val_scenes, out, seed=args.seed,
                        quiet=args.quiet)
    print(json.dumps(metrics, indent=1))
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    pipe = Pipeline(cfg, seed=args.seed)
    if args.checkpoint:
        pipe.load(args.checkpoint)
    scenes = _load_scenes_arg(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        ctx = pipe.build_context(scene)
        instances = pipe.predict(ctx)
        save_predictions(out / f"{scene.id}.json", scene.id, instances)
    print(f"wrote {len(scenes)} prediction files to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    train_scenes, val_scenes = load_dataset(args.scenes)
    scenes = {"train": train_scenes, "val": val_scenes,
              "all": train_scenes + val_scenes}[args.split]
    pred_dir = Path(args.predictions)
    predictions = []
    for scene in scenes:
        path = pred_dir / f"{scene.id}.json"
        if not path.exists():
            raise DataError(f"no prediction file for scene {scene.id!r} in {pred_dir}")
        pid, instances = load_predictions(path)
        if pid != scene.id:
            raise DataError(f"prediction {path} is for scene {pid!r}, expected {scene.id!r}")
        predictions.append(instances)
    report = evaluate_scenes(scenes, predictions, thresholds=cfg.ap_thresholds,
                             spacing=cfg.sample_spacing)
    _emit(report, args.out)
    return 0


def cmd_render(args) -> int:
    cfg = _resolve_config(args)
    if bool(args.scenes) == bool(args.predictions):
        raise DataError("render needs exactly one of --scenes or --predictions")
    if args.scenes:
        svg = render_scene(load_scene(args.scenes), cfg.bev())
    else:
        _, instances = load_predictions(args.predictions)
        svg = render_instances(instances, cfg.bev())
    save_svg(svg, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    pipe = Pipeline(cfg, seed=args.seed)
    if args.checkpoint:
        pipe.load(args.checkpoint)
    if args.scenes:
        scenes = _load_scenes_arg(args.scenes)
    else:
        scenes = [synth_scene(args.seed + i, cfg.bev()) for i in range(args.count)]
    report = run_bench(pipe, scenes)
    _emit(report, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, samples=args.samples, tol=args.tol)
    _emit(report, args.out)
    if not report["ok"]:
        raise NumericError(
            f"max gradient error {report['max_err']:.3e} exceeds {args.tol:g}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mapgraph",
        description="Vectorized map element detection, matching, and evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **help_kw):
        sp = sub.add_parser(name, **help_kw)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="path to a config JSON file")
        sp.add_argument("--profile", choices=("full", "desk"),
                        help="built-in config profile (default: full)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--ablate", choices=sorted(ABLATIONS),
                        help="named ablation switch applied on top of the config")
        return sp

    sp = add("gen-data", cmd_gen_data, help="generate a synthetic scene dataset")
    sp.add_argument("--out", required=True, help="dataset directory to create")
    sp.add_argument("--count", type=int, default=10, help="number of scenes")

    sp = add("train", cmd_train, help="train the pipeline on a dataset")
    sp.add_argument("--scenes", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    sp.add_argument("--steps", type=int, help="override cfg.train_steps")
    sp.add_argument("--quiet", action="store_true")

    sp = add("infer", cmd_infer, help="write prediction files for scenes")
    sp.add_argument("--scenes", required=True, help="dataset directory or scene file")
    sp.add_argument("--checkpoint", help="trained checkpoint to load")
    sp.add_argument("--out", required=True, help="directory for prediction files")

    sp = add("eval", cmd_eval, help="instance AP of predictions against a dataset")
    sp.add_argument("--scenes", required=True, help="dataset directory")
    sp.add_argument("--predictions", required=True, help="directory of prediction files")
    sp.add_argument("--split", choices=("train", "val", "all"), default="all")
    sp.add_argument("--out", help="also write the report JSON here")

    sp = add("render", cmd_render, help="render a scene or predictions to SVG")
    sp.add_argument("--scenes", help="scene JSON file")
    sp.add_argument("--predictions", help="prediction JSON file")
    sp.add_argument("--out", required=True, help="output SVG path")

    sp = add("bench", cmd_bench, help="inference timing per pipeline stage")
    sp.add_argument("--scenes", help="dataset directory or scene file")
    sp.add_argument("--checkpoint", help="checkpoint to load")
    sp.add_argument("--count", type=int, default=120,
                    help="synthetic scenes when --scenes is not given")
    sp.add_argument("--out", help="also write the report JSON here")

    sp = add("gradcheck", cmd_gradcheck, help="finite-difference gradient verification")
    sp.add_argument("--samples", type=int, default=4,
                    help="sampled coordinates per parameter tensor")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--out", help="also write the report JSON here")

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MapGraphError as e:
        sys.stderr.write(f"error:{e.category}: {e}\n")
        return 1
    except OSError as e:
        sys.stderr.write(f"error:io: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
