import numpy as np
import pytest

from mapgraph.geometry import BevConfig


@pytest.fixture
def desk_cfg() -> BevConfig:
    """Small 64x128 grid (9.6 x 19.2 m at 0.15 m) used by most tests."""
    return BevConfig(x_range=(-4.8, 4.8), y_range=(-9.6, 9.6), resolution=0.15)


@pytest.fixture
def full_cfg() -> BevConfig:
    """Full-scale 200x400 grid."""
    return BevConfig()


@pytest.fixture
def tiny_cfg() -> BevConfig:
    """32x32 grid for gradient-check sized problems."""
    return BevConfig(x_range=(-2.4, 2.4), y_range=(-2.4, 2.4), resolution=0.15)


def brute_force_dt(mask: np.ndarray, max_dist: float) -> np.ndarray:
    """All-pairs Euclidean distance to the nearest True pixel, truncated."""
    h, w = mask.shape
    out = np.full((h, w), max_dist)
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return out
    py, px = np.mgrid[0:h, 0:w]
    d2 = (py[:, :, None] - ys[None, None, :]) ** 2 + (px[:, :, None] - xs[None, None, :]) ** 2
    return np.minimum(np.sqrt(d2.min(axis=2)), max_dist)
