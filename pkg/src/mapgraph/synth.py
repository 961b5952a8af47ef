"""Synthetic road-layout scenes, scene files, and dataset folders.

A scene is built around a low-curvature spine running along the y axis:
dividers and the two boundaries are lateral offsets of the spine,
pedestrian crossings are short transverse polylines between the
boundaries.  Everything is driven by one ``numpy`` generator seeded per
scene, so scenes are reproducible byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import BevConfig, MapElement, MapScene, validate_scene

MANIFEST_NAME = "manifest.json"
SCENES_SUBDIR = "scenes"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GenParams:
    """Generator knobs; fractions are relative to the perception range."""

    n_dividers: tuple[int, int] = (1, 4)
    n_crossings: tuple[int, int] = (0, 3)
    margin_frac: float = 0.03  # keep-out band at the range border
    center_frac: float = 0.10  # road center offset, fraction of x half-span
    amp_frac: tuple[float, float] = (0.02, 0.15)  # spine curvature amplitude
    freq: tuple[float, float] = (0.4, 1.1)  # spine oscillations across the range
    road_frac: tuple[float, float] = (0.70, 0.88)  # half-width vs available space
    min_lane_spacing: float = 2.6  # meters between parallel elements
    extent_frac: tuple[float, float] = (0.55, 0.85)  # along-range length of lines
    cross_frac: tuple[float, float] = (0.80, 0.95)  # crossing half-span vs road
    line_spacing: float = 1.0  # meters between generated line points
    crossing_spacing: float = 0.5


def synth_scene(seed: int, cfg: BevConfig, gp: GenParams = GenParams()) -> MapScene:
    """Deterministic synthetic scene for ``seed`` within ``cfg``'s range."""
    rng = np.random.default_rng(seed)
    half_x = 0.5 * (cfg.x_range[1] - cfg.x_range[0]) * (1.0 - gp.margin_frac)
    half_y = 0.5 * (cfg.y_range[1] - cfg.y_range[0]) * (1.0 - gp.margin_frac)
    mid_x = 0.5 * (cfg.x_range[0] + cfg.x_range[1])
    mid_y = 0.5 * (cfg.y_range[0] + cfg.y_range[1])

    center = rng.uniform(-gp.center_frac, gp.center_frac) * half_x
    amp = rng.uniform(*gp.amp_frac) * half_x
    freq = rng.uniform(*gp.freq)
    phase = rng.uniform(0.0, 2.0 * np.pi)

    def spine(y):
        return center + amp * np.sin(np.pi * freq * y / half_y + phase)

    # road half-width, bounded so spine +- road stays inside the range
    room = half_x - abs(center) - amp
    road = rng.uniform(*gp.road_frac) * room

    # dividers: evenly spaced lane separators, capped by a minimum spacing
    lo, hi = gp.n_dividers
    n_div = int(rng.integers(lo, hi + 1))
    max_by_spacing = max(1, int(np.floor(2.0 * road / gp.min_lane_spacing)) - 1)
    n_div = min(n_div, max_by_spacing)
    slots = np.linspace(-road, road, n_div + 2)[1:-1]
    spacing = 2.0 * road / (n_div + 1)
    offsets = slots + rng.uniform(-0.12, 0.12, size=n_div) * spacing

    def line_element(offset: float, cls: str) -> MapElement:
        frac = rng.uniform(*gp.extent_frac)
        length = frac * 2.0 * half_y
        y0 = rng.uniform(-half_y, half_y - length)
        n = max(2, int(np.ceil(length / gp.line_spacing)) + 1)
        ys = np.linspace(y0, y0 + length, n)
        xs = spine(ys) + offset
        return MapElement(cls, np.stack([mid_x + xs, mid_y + ys], axis=1))

    elements = [line_element(off, "divider") for off in offsets]

    # crossings: transverse segments at well-separated y positions
    n_cross = int(rng.integers(gp.n_crossings[0], gp.n_crossings[1] + 1))
    ys_used: list[float] = []
    min_sep = 0.22 * 2.0 * half_y
    for _ in range(n_cross):
        for _attempt in range(8):
            yc = rng.uniform(-0.9 * half_y, 0.9 * half_y)
            if all(abs(yc - y) >= min_sep for y in ys_used):
                ys_used.append(yc)
                break
        else:
            continue
        span = rng.uniform(*gp.cross_frac) * road
        tilt = rng.uniform(-0.015, 0.015) * 2.0 * half_y
        xc = spine(yc)
        n = max(2, int(np.ceil(2.0 * span / gp.crossing_spacing)) + 1)
        ts = np.linspace(-1.0, 1.0, n)
        xs = xc + ts * span
        ys = np.clip(yc + ts * tilt, -half_y, half_y)
        pts = np.stack([mid_x + xs, mid_y + ys], axis=1)
        elements.append(MapElement("ped_crossing", pts))

    # two outermost boundaries
    elements.append(line_element(-road, "boundary"))
    elements.append(line_element(road, "boundary"))

    scene = MapScene(id=f"scene_{seed:08d}", elements=elements)
    validate_scene(scene, cfg)
    return scene


# ---------------------------------------------------------------------------
# scene files and dataset folders


def scene_to_dict(scene: MapScene) -> dict:
    return {
        "id": scene.id,
        "elements": [
            {"class": e.cls, "points": [[float(x), float(y)] for x, y in e.points]}
            for e in scene.elements
        ],
    }


def scene_from_dict(d: dict) -> MapScene:
    try:
        elements = [
            MapElement(e["class"], np.asarray(e["points"], dtype=np.float64))
            for e in d["elements"]
        ]
        return MapScene(id=str(d["id"]), elements=elements)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed scene object: {e}") from e


def save_scene(scene: MapScene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def load_scene(path: str | Path) -> MapScene:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"cannot read scene {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"scene {path} is not valid JSON: {e}") from e
    return scene_from_dict(d)


def write_dataset(scenes: list[MapScene], out_dir: str | Path, n_val: int) -> Path:
    """Write scene files plus a train/val manifest; returns the manifest path."""
    if not 0 <= n_val < len(scenes):
        raise DataError(f"n_val={n_val} out of range for {len(scenes)} scenes")
    out_dir = Path(out_dir)
    scene_dir = out_dir / SCENES_SUBDIR
    scene_dir.mkdir(parents=True, exist_ok=True)
    rel_paths = []
    for scene in scenes:
        rel = f"{SCENES_SUBDIR}/{scene.id}.json"
        save_scene(scene, out_dir / rel)
        rel_paths.append(rel)
    manifest = {
        "version": FORMAT_VERSION,
        "train": rel_paths[: len(scenes) - n_val],
        "val": rel_paths[len(scenes) - n_val :],
    }
    mpath = out_dir / MANIFEST_NAME
    mpath.write_text(json.dumps(manifest, indent=1) + "\n")
    return mpath


def generate_dataset(
    cfg: BevConfig,
    out_dir: str | Path,
    count: int,
    base_seed: int = 0,
    gp: GenParams = GenParams(),
) -> Path:
    """Generate ``count`` scenes with seeds base_seed..base_seed+count-1.

    The last 10% (at least one scene) becomes the validation split.
    """
    if count < 2:
        raise DataError("a dataset needs at least two scenes")
    scenes = [synth_scene(base_seed + i, cfg, gp) for i in range(count)]
    return write_dataset(scenes, out_dir, n_val=max(1, count // 10))


def load_dataset(dataset_dir: str | Path) -> tuple[list[MapScene], list[MapScene]]:
    """Load (train, val) scene lists from a dataset folder."""
    dataset_dir = Path(dataset_dir)
    mpath = dataset_dir / MANIFEST_NAME
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as e:
        raise DataError(f"cannot read manifest {mpath}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {mpath} is not valid JSON: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')!r}")
    splits = []
    for key in ("train", "val"):
        rels = manifest.get(key)
        if not isinstance(rels, list):
            raise DataError(f"manifest is missing the {key!r} list")
        splits.append([load_scene(dataset_dir / rel) for rel in rels])
    return splits[0], splits[1]
