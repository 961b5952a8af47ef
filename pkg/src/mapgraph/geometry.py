"""Scene model, BEV grid geometry, rasterization, and distance fields.

Coordinate conventions, used everywhere downstream:

* world coordinates are meters, ``x`` forward (row axis), ``y`` lateral
  (column axis);
* pixel coordinates are ``(px, py)`` with ``px`` along the grid width
  (increasing world ``y``) and ``py`` along the height (decreasing
  world ``x``), so raster arrays are indexed ``[py, px]``;
* each non-overlapping ``cell x cell`` pixel block may own at most one
  vertex, encoded as channel ``dy * cell + dx`` of the heatmap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError

CLASS_NAMES = ("divider", "ped_crossing", "boundary")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
N_CLASSES = len(CLASS_NAMES)

DT_MAX = 10.0  # truncation radius of the distance fields, in pixels


@dataclass(frozen=True)
class BevConfig:
    """Perception range and raster geometry."""

    x_range: tuple[float, float] = (-15.0, 15.0)
    y_range: tuple[float, float] = (-30.0, 30.0)
    resolution: float = 0.15
    cell: int = 8

    def __post_init__(self):
        if self.resolution <= 0:
            raise ConfigError("resolution must be positive")
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ConfigError("empty perception range")
        for span, name in ((self.h_bev, "x"), (self.w_bev, "y")):
            if span % self.cell != 0:
                raise ConfigError(
                    f"{name} span gives {span} px, not divisible by cell={self.cell}"
                )

    def _span_px(self, lo: float, hi: float) -> int:
        n = (hi - lo) / self.resolution
        n_round = round(n)
        if abs(n - n_round) > 1e-6:
            raise ConfigError(f"range ({lo}, {hi}) is not a whole number of pixels")
        return int(n_round)

    @property
    def h_bev(self) -> int:
        return self._span_px(*self.x_range)

    @property
    def w_bev(self) -> int:
        return self._span_px(*self.y_range)

    @property
    def h_cells(self) -> int:
        return self.h_bev // self.cell

    @property
    def w_cells(self) -> int:
        return self.w_bev // self.cell

    @property
    def dustbin(self) -> int:
        """Heatmap channel index meaning 'no vertex in this cell'."""
        return self.cell * self.cell

    def to_pixels(self, points_m: np.ndarray) -> np.ndarray:
        """Continuous (px, py) pixel coordinates of (x, y) meter points."""
        points_m = np.asarray(points_m, dtype=np.float64)
        px = (points_m[:, 1] - self.y_range[0]) / self.resolution
        py = (self.x_range[1] - points_m[:, 0]) / self.resolution
        return np.stack([px, py], axis=1)

    def to_pixel_indices(self, points_m: np.ndarray) -> np.ndarray:
        """Integer pixel indices, clipped to the grid."""
        cont = np.floor(self.to_pixels(points_m)).astype(np.int64)
        cont[:, 0] = np.clip(cont[:, 0], 0, self.w_bev - 1)
        cont[:, 1] = np.clip(cont[:, 1], 0, self.h_bev - 1)
        return cont

    def pixels_to_meters(self, pix: np.ndarray) -> np.ndarray:
        """Meter coordinates of pixel centers given integer (px, py)."""
        pix = np.asarray(pix, dtype=np.float64)
        y = self.y_range[0] + (pix[:, 0] + 0.5) * self.resolution
        x = self.x_range[1] - (pix[:, 1] + 0.5) * self.resolution
        return np.stack([x, y], axis=1)


@dataclass
class MapElement:
    """One vectorized map element: a class label and an ordered polyline."""

    cls: str
    points: np.ndarray  # (n, 2) meters

    def __post_init__(self):
        if self.cls not in CLASS_INDEX:
            raise DataError(f"unknown element class {self.cls!r}")
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 2:
            raise DataError("polyline needs at least two (x, y) points")
        if np.any(np.all(self.points[1:] == self.points[:-1], axis=1)):
            raise DataError("polyline has repeated consecutive points")


@dataclass
class MapScene:
    id: str
    elements: list[MapElement] = field(default_factory=list)


def validate_scene(scene: MapScene, cfg: BevConfig, tol: float = 1e-9) -> None:
    """Raise DataError when any element point leaves the perception range."""
    for k, elem in enumerate(scene.elements):
        x, y = elem.points[:, 0], elem.points[:, 1]
        if (
            x.min() < cfg.x_range[0] - tol
            or x.max() > cfg.x_range[1] + tol
            or y.min() < cfg.y_range[0] - tol
            or y.max() > cfg.y_range[1] + tol
        ):
            raise DataError(f"scene {scene.id}: element {k} leaves the perception range")


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Arc-length resampling at roughly ``spacing``, keeping both endpoints."""
    points = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total == 0.0:
        raise DataError("cannot resample a zero-length polyline")
    n = max(2, int(np.ceil(total / spacing)) + 1)
    t = np.linspace(0.0, total, n)
    x = np.interp(t, arc, points[:, 0])
    y = np.interp(t, arc, points[:, 1])
    return np.stack([x, y], axis=1)


@dataclass
class GroundTruthRaster:
    """Vertex labels plus per-element ordered vertex chains."""

    labels: np.ndarray  # (h_cells, w_cells) int64, dustbin where empty
    chains: list[np.ndarray]  # per element, (k, 2) int pixel (px, py), arc order
    classes: np.ndarray  # (n_elements,) int

    @property
    def vertex_xy(self) -> np.ndarray:
        """All ground-truth vertices concatenated in element order, (n, 2)."""
        parts = [c for c in self.chains if len(c)]
        if not parts:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate(parts, axis=0)


def rasterize_ground_truth(scene: MapScene, cfg: BevConfig) -> GroundTruthRaster:
    """Subsample one vertex per occupied cell and record element chains.

    Elements are walked in list order and samples in arc-length order,
    so a contested cell keeps the sample with the smallest arc-length
    parameter of the lowest-index element.
    """
    labels = np.full((cfg.h_cells, cfg.w_cells), cfg.dustbin, dtype=np.int64)
    chains = []
    classes = []
    for elem in scene.elements:
        pts = resample_polyline(elem.points, cfg.resolution)
        pix = cfg.to_pixel_indices(pts)
        chain = []
        for px, py in pix:
            row, col = py // cfg.cell, px // cfg.cell
            if labels[row, col] != cfg.dustbin:
                continue
            labels[row, col] = (py % cfg.cell) * cfg.cell + (px % cfg.cell)
            chain.append((px, py))
        chains.append(np.asarray(chain, dtype=np.int64).reshape(-1, 2))
        classes.append(CLASS_INDEX[elem.cls])
    return GroundTruthRaster(labels, chains, np.asarray(classes, dtype=np.int64))


def rasterize_vertex_labels(scene: MapScene, cfg: BevConfig) -> np.ndarray:
    """Just the (h_cells, w_cells) vertex label grid."""
    return rasterize_ground_truth(scene, cfg).labels


def class_masks(scene: MapScene, cfg: BevConfig) -> np.ndarray:
    """(n_classes, H, W) boolean masks of rasterized element pixels."""
    masks = np.zeros((N_CLASSES, cfg.h_bev, cfg.w_bev), dtype=bool)
    for elem in scene.elements:
        pts = resample_polyline(elem.points, cfg.resolution)
        pix = cfg.to_pixel_indices(pts)
        masks[CLASS_INDEX[elem.cls], pix[:, 1], pix[:, 0]] = True
    return masks


def distance_transform(scene: MapScene, cfg: BevConfig, max_dist: float = DT_MAX) -> np.ndarray:
    """(H, W, n_classes) truncated Euclidean distance, per class, in pixels.

    Exactly zero on rasterized element pixels; channels with no elements
    are ``max_dist`` everywhere.
    """
    masks = class_masks(scene, cfg)
    out = np.full((cfg.h_bev, cfg.w_bev, N_CLASSES), max_dist, dtype=np.float64)
    for c in range(N_CLASSES):
        if not masks[c].any():
            continue
        dist = ndimage.distance_transform_edt(~masks[c])
        out[:, :, c] = np.minimum(dist, max_dist)
    return out


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance between two non-empty point sets.

    0.5 * (mean over a of nearest-b distance + mean over b of nearest-a),
    in whatever units the inputs use.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise DataError("chamfer distance of an empty point set")
    d = cdist(a, b)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
