"""SVG rendering of map scenes and predicted instances.

Drawing happens in meter coordinates with a fixed color per class.  The
ground-truth and prediction renders of identical geometry differ only
in the layer label, which makes diff-based comparisons trivial.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .decode import PredictedInstance
from .errors import DataError
from .geometry import BevConfig, CLASS_NAMES, MapScene

CLASS_COLORS = {
    "divider": "#e08020",
    "ped_crossing": "#2b6fd0",
    "boundary": "#2e9e44",
}

STROKE_M = 0.2


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def render_svg(
    items: list[tuple[str, np.ndarray]], bev: BevConfig, label: str
) -> str:
    """Render (class name, meter polyline) pairs to an SVG document.

    One path element per instance, stroke color by class.  SVG y grows
    downward, so meter y is negated; the viewbox spans the perception
    range exactly.
    """
    x0, x1 = bev.x_range
    y0, y1 = bev.y_range
    w = x1 - x0
    h = y1 - y0
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{_fmt(x0)} {_fmt(-y1)} '
        f'{_fmt(w)} {_fmt(h)}" width="{w * 40:.0f}" height="{h * 40:.0f}">',
        f'<rect x="{_fmt(x0)}" y="{_fmt(-y1)}" width="{_fmt(w)}" height="{_fmt(h)}" '
        'fill="#fafafa" stroke="#808080" stroke-width="0.05"/>',
        f'<g id="{label}">',
    ]
    for cls, pts in items:
        if cls not in CLASS_COLORS:
            raise DataError(f"unknown class {cls!r}")
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DataError(f"polyline must be (n, 2), got {pts.shape}")
        color = CLASS_COLORS[cls]
        d = "M " + " L ".join(f"{_fmt(p[0])},{_fmt(-p[1])}" for p in pts)
        lines.append(
            f'<path fill="none" stroke="{color}" stroke-width="{STROKE_M}" '
            f'stroke-linejoin="round" stroke-linecap="round" d="{d}"/>'
        )
    lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_scene(scene: MapScene, bev: BevConfig) -> str:
    """Ground-truth layer of a scene."""
    items = [(el.cls, el.points) for el in scene.elements]
    return render_svg(items, bev, label="ground-truth")


def render_instances(instances: list[PredictedInstance], bev: BevConfig) -> str:
    """Prediction layer of decoded instances."""
    items = [(CLASS_NAMES[p.cls], p.points) for p in instances]
    return render_svg(items, bev, label="prediction")


def save_svg(text: str, path: str | Path) -> None:
    Path(path).write_text(text)
