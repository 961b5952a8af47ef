"""Numeric gradient verification for the autodiff ops and the full loss.

Each op gets a small randomized check: parameters in a store, a scalar
objective that routes through the op, and central finite differences
compared against the tape gradient.  A second check differentiates the
complete weighted training loss on a four-vertex toy scene, covering
embed, message passing, the prediction heads, Sinkhorn normalization,
and both matcher loss terms in one graph.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .config import RunConfig
from .geometry import MapElement, MapScene
from .model import Pipeline
from .params import ParamStore

OP_TOL = 1e-4


def _store(rng: np.random.Generator, **shapes) -> ParamStore:
    st = ParamStore()
    for name, shape in shapes.items():
        st.add(name, rng.normal(size=shape))
    return st


def _weighted(y: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar objective with a fixed random cotangent."""
    w = Tensor(rng.normal(size=y.data.shape))
    return ad.tsum(ad.mul(y, w))


def op_checks(seed: int = 0) -> list[tuple[str, object, ParamStore]]:
    """(name, objective, store) triples, one per autodiff op.

    Inputs are kept away from kinks (relu, clamp) and singularities
    (div, log, sqrt) by margins far wider than the probe step.
    """
    rng = np.random.default_rng(seed)
    checks = []

    def case(name, st, fn):
        checks.append((name, fn, st))

    st = _store(rng, a=(3, 4), b=(3, 4))
    case("add", st, lambda st=st: _weighted(ad.add(st["a"], st["b"]), np.random.default_rng(1)))
    st = _store(rng, a=(3, 4), b=(3, 4))
    case("sub", st, lambda st=st: _weighted(ad.sub(st["a"], st["b"]), np.random.default_rng(2)))
    st = _store(rng, a=(3, 4))
    case("neg", st, lambda st=st: _weighted(ad.neg(st["a"]), np.random.default_rng(3)))
    st = _store(rng, a=(3, 4), b=(3, 4))
    case("mul", st, lambda st=st: _weighted(ad.mul(st["a"], st["b"]), np.random.default_rng(4)))

    st = ParamStore()
    st.add("a", np.random.default_rng(seed + 1).normal(size=(3, 4)))
    st.add("b", np.sign(np.random.default_rng(seed + 2).normal(size=(3, 4))) * 1.5)
    case("div", st, lambda st=st: _weighted(ad.div(st["a"], st["b"]), np.random.default_rng(5)))

    st = _store(rng, a=(3, 4), b=(4, 5))
    case("matmul", st, lambda st=st: _weighted(ad.matmul(st["a"], st["b"]), np.random.default_rng(6)))
    st = _store(rng, a=(2, 3, 4), b=(2, 4, 5))
    case("matmul_batched", st,
         lambda st=st: _weighted(ad.matmul(st["a"], st["b"]), np.random.default_rng(7)))

    st = ParamStore()
    a = np.random.default_rng(seed + 3).normal(size=(3, 4))
    a = np.where(np.abs(a) < 0.2, 0.5, a)  # keep clear of the relu kink
    st.add("a", a)
    case("relu", st, lambda st=st: _weighted(ad.relu(st["a"]), np.random.default_rng(8)))

    st = _store(rng, a=(3, 4))
    case("exp", st, lambda st=st: _weighted(ad.exp(st["a"]), np.random.default_rng(9)))
    st = ParamStore()
    st.add("a", 0.5 + np.random.default_rng(seed + 4).uniform(0.2, 2.0, size=(3, 4)))
    case("log", st, lambda st=st: _weighted(ad.log(st["a"]), np.random.default_rng(10)))
    st = ParamStore()
    st.add("a", 0.5 + np.random.default_rng(seed + 5).uniform(0.2, 2.0, size=(3, 4)))
    case("sqrt", st, lambda st=st: _weighted(ad.sqrt(st["a"]), np.random.default_rng(11)))
    st = _store(rng, a=(3, 4))
    case("sin", st, lambda st=st: _weighted(ad.sin(st["a"]), np.random.default_rng(12)))
    st = _store(rng, a=(3, 4))
    case("cos", st, lambda st=st: _weighted(ad.cos(st["a"]), np.random.default_rng(13)))

    st = ParamStore()
    a = np.random.default_rng(seed + 6).uniform(-2.0, 2.0, size=(4, 5))
    a = np.where(np.abs(a - 0.9) < 0.05, 0.7, a)  # off the clamp edges
    a = np.where(np.abs(a + 0.7) < 0.05, -0.5, a)
    st.add("a", a)
    case("clamp", st,
         lambda st=st: _weighted(ad.clamp(st["a"], -0.7, 0.9), np.random.default_rng(14)))

    st = _store(rng, a=(3, 4))
    case("reshape", st,
         lambda st=st: _weighted(ad.reshape(st["a"], (2, 6)), np.random.default_rng(15)))
    st = _store(rng, a=(2, 3, 4))
    case("transpose", st,
         lambda st=st: _weighted(ad.transpose(st["a"], (1, 0, 2)), np.random.default_rng(16)))
    st = _store(rng, a=(3, 2), b=(3, 4))
    case("concat", st,
         lambda st=st: _weighted(ad.concat([st["a"], st["b"]], axis=1),
                                 np.random.default_rng(17)))
    st = _store(rng, a=(4, 5))
    case("getitem", st,
         lambda st=st: _weighted(ad.getitem(st["a"], (slice(1, 3), slice(None, None, 2))),
                                 np.random.default_rng(18)))

    st = _store(rng, a=(5, 4))
    rows = np.array([0, 2, 2, 4])
    cols = np.array([1, 3, 3, 0])
    case("gather2d", st,
         lambda st=st: _weighted(ad.gather2d(st["a"], rows, cols), np.random.default_rng(19)))

    st = _store(rng, a=(3, 4))
    case("tsum", st, lambda st=st: ad.tsum(st["a"]))
    st = _store(rng, a=(3, 4))
    case("tsum_axis", st,
         lambda st=st: _weighted(ad.tsum(st["a"], axis=1), np.random.default_rng(20)))
    st = _store(rng, a=(3, 4))
    case("tmean", st, lambda st=st: ad.tmean(st["a"]))
    st = _store(rng, a=(3, 4))
    case("tmean_axis", st,
         lambda st=st: _weighted(ad.tmean(st["a"], axis=0, keepdims=True),
                                 np.random.default_rng(21)))

    st = _store(rng, a=(3, 5))
    case("softmax", st,
         lambda st=st: _weighted(ad.softmax(st["a"], axis=-1), np.random.default_rng(22)))
    st = _store(rng, a=(3, 5))
    case("log_softmax", st,
         lambda st=st: _weighted(ad.log_softmax(st["a"], axis=-1), np.random.default_rng(23)))
    st = _store(rng, a=(3, 5))
    case("logsumexp", st,
         lambda st=st: _weighted(ad.logsumexp(st["a"], axis=-1), np.random.default_rng(24)))
    return checks


def toy_scene() -> MapScene:
    """One divider chain with four well-separated vertices."""
    pts = np.array([[-2.0, -6.0], [-1.0, -2.0], [0.5, 2.0], [2.0, 6.0]])
    return MapScene(id="toy4", elements=[MapElement(cls="divider", points=pts)])


def toy_config() -> RunConfig:
    return RunConfig.desk(
        capacity=8, embed_dim=16, pe_bands=4, gnn_layers=2, gnn_heads=2,
        bev_channels=4, sinkhorn_iters=50,
    )


def full_loss_check(seed: int = 0, samples: int = 2, step: float = 1e-5) -> float:
    """Finite-difference check of the total weighted loss end to end."""
    pipe = Pipeline(toy_config(), seed=seed)
    ctx = pipe.build_context(toy_scene())

    def f():
        return pipe.forward(ctx).losses["total"]

    return grad_check(f, pipe.store, step=step, samples_per_param=samples,
                      rng=np.random.default_rng(seed + 100))


def run_all(seed: int = 0, samples: int = 4, tol: float = OP_TOL) -> dict:
    """Run every op check plus the full-loss check; report max errors."""
    results = {}
    for name, fn, st in op_checks(seed):
        results[name] = grad_check(
            fn, st, step=1e-5, samples_per_param=samples,
            rng=np.random.default_rng(seed + hash(name) % 1000),
        )
    results["full_loss"] = full_loss_check(seed=seed)
    worst = max(results.values())
    return {
        "tol": tol,
        "checks": {k: float(v) for k, v in results.items()},
        "max_err": float(worst),
        "ok": bool(worst <= tol),
    }
