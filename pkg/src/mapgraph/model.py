"""End-to-end pipeline: raster in, polyline instances out.

Holds every parameter group (detector heads, vertex embedding, graph
network) in one store and exposes the training loss and the inference
path.  Per-scene arrays that do not depend on parameters (input
features, vertex labels, distance-field targets) are cached in a
SceneContext so repeated epochs over a small scene set stay cheap.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import RunConfig
from .decode import PredictedInstance, decode
from .detector import (
    confidence_raster,
    dt_head,
    heatmap_to_confidence,
    init_detector_params,
    oracle_heads,
    patch_matrix,
    render_bev_features,
    vertex_head,
)
from .extraction import VertexSet, embed, extract_vertices, init_embed_params
from .geometry import GroundTruthRaster, MapScene, distance_transform, rasterize_ground_truth
from .losses import (
    GtPairing,
    adjacency_loss,
    class_loss,
    dt_loss,
    match_gt,
    total_loss,
    vertex_loss,
)
from .matcher import (
    AdjacencyMatrix,
    init_matcher_params,
    matcher_heads,
    message_passing,
    score_matrix,
    sinkhorn,
)
from .params import ParamStore, load_checkpoint, save_checkpoint

ORACLE_FLIP_PROB = 0.05
ORACLE_DT_NOISE = 0.25


@dataclass
class SceneContext:
    """Parameter-independent arrays for one scene."""

    scene: MapScene
    features: np.ndarray  # (H, W, C)
    patches: np.ndarray  # (n_cells, cell*cell*C)
    labels: np.ndarray  # (h_cells, w_cells) int
    dt_gt: np.ndarray  # (H, W, 3)
    gt: GroundTruthRaster


@dataclass
class ForwardResult:
    vs: VertexSet
    losses: dict[str, Tensor]
    cls_logits: Tensor | None = None
    adj: AdjacencyMatrix | None = None
    pairing: GtPairing | None = None
    vertex_logits: Tensor | None = None
    dt_pred: Tensor | None = None
    timings: dict[str, float] = field(default_factory=dict)


def _scene_seed(scene_id: str) -> int:
    return zlib.crc32(scene_id.encode())


class Pipeline:
    def __init__(self, cfg: RunConfig, seed: int = 0):
        self.cfg = cfg
        self.bev = cfg.bev()
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        init_detector_params(self.store, rng, self.bev, cfg.bev_channels)
        init_embed_params(self.store, rng, self.bev, cfg.pe_bands, cfg.embed_dim)
        init_matcher_params(self.store, rng, cfg.embed_dim, cfg.gnn_layers, cfg.gnn_heads)

    def build_context(self, scene: MapScene, noise_seed: int | None = None) -> SceneContext:
        gt = rasterize_ground_truth(scene, self.bev)
        features = render_bev_features(
            scene,
            self.bev,
            n_channels=self.cfg.bev_channels,
            noise=self.cfg.bev_noise,
            seed=_scene_seed(scene.id) if noise_seed is None else noise_seed,
        )
        return SceneContext(
            scene=scene,
            features=features,
            patches=patch_matrix(features, self.bev),
            labels=gt.labels,
            dt_gt=distance_transform(scene, self.bev),
            gt=gt,
        )

    def _detector(self, ctx: SceneContext) -> tuple[Tensor, Tensor]:
        if self.cfg.oracle_detector:
            logits, dt = oracle_heads(
                ctx.scene,
                self.bev,
                flip_prob=ORACLE_FLIP_PROB,
                dt_noise=ORACLE_DT_NOISE,
                seed=_scene_seed(ctx.scene.id) ^ 0x5EED,
                dt_gt=ctx.dt_gt,
                labels=ctx.labels,
            )
            return Tensor(logits), Tensor(dt)
        v = vertex_head(ctx.features, self.store, self.bev, patches=ctx.patches)
        d = dt_head(ctx.features, self.store, self.bev, patches=ctx.patches)
        return v, d

    def forward(self, ctx: SceneContext) -> ForwardResult:
        """Compute all loss parts for one scene.

        Vertex positions and the distance patches fed to the embedding
        come from detached detector outputs: the detector trains only
        through its own two losses, the matcher only through the
        adjacency and class losses.
        """
        cfg = self.cfg
        t0 = time.perf_counter()
        vertex_logits, dt_pred = self._detector(ctx)
        scores = heatmap_to_confidence(vertex_logits.data)
        t1 = time.perf_counter()
        vs = extract_vertices(
            scores, dt_pred.data, self.bev, capacity=cfg.capacity, threshold=cfg.conf_threshold
        )
        t2 = time.perf_counter()

        losses: dict[str, Tensor] = {
            "vertex": vertex_loss(vertex_logits, ctx.labels),
            "dt": dt_loss(dt_pred, ctx.dt_gt),
        }
        result = ForwardResult(
            vs=vs, losses=losses, vertex_logits=vertex_logits, dt_pred=dt_pred
        )
        result.timings["detector"] = t1 - t0
        result.timings["extract"] = t2 - t1
        if vs.count == 0:
            losses["adj"] = Tensor(0.0)
            losses["cls"] = Tensor(0.0)
            losses["total"] = total_loss(
                losses["vertex"], losses["dt"], losses["adj"], losses["cls"], cfg.lambdas()
            )
            return result

        g0 = embed(
            vs,
            self.store,
            self.bev,
            n_bands=cfg.pe_bands,
            disable_pe=cfg.disable_pe,
            disable_dt=cfg.disable_dt_embed,
        )
        g = message_passing(g0, vs.mask, self.store, cfg.gnn_layers, cfg.gnn_heads)
        cls_logits, desc = matcher_heads(g, vs.mask, self.store)
        sm = score_matrix(
            desc, vs.mask, self.store, diag_mode=cfg.diag_mode, score_norm=cfg.score_norm
        )
        t3 = time.perf_counter()
        adj = sinkhorn(sm, iters=cfg.sinkhorn_iters)
        t4 = time.perf_counter()
        result.timings["gnn"] = t3 - t2
        result.timings["sinkhorn"] = t4 - t3

        pairing = match_gt(vs, ctx.gt, d0=cfg.match_d0)
        losses["adj"] = adjacency_loss(adj, pairing)
        losses["cls"] = class_loss(cls_logits, pairing)
        losses["total"] = total_loss(
            losses["vertex"], losses["dt"], losses["adj"], losses["cls"], cfg.lambdas()
        )
        result.cls_logits = cls_logits
        result.adj = adj
        result.pairing = pairing
        return result

    def predict(self, ctx: SceneContext, timings: dict | None = None) -> list[PredictedInstance]:
        """Inference: forward pass without a tape, then decoding."""
        res = self.forward(ctx)
        k = res.vs.count
        if k < 2 or res.adj is None:
            return []
        t0 = time.perf_counter()
        probs = np.exp(res.cls_logits.data[:k])
        probs = probs / probs.sum(axis=1, keepdims=True)
        instances = decode(
            res.adj.probs.data,
            res.vs.xy[:k],
            res.vs.conf[:k],
            probs,
            self.bev,
            tau=self.cfg.tau_adj,
        )
        res.timings["decode"] = time.perf_counter() - t0
        if timings is not None:
            for name, dt in res.timings.items():
                timings[name] = timings.get(name, 0.0) + dt
        return instances

    def loss_and_grads(self, ctxs: list[SceneContext]) -> tuple[dict[str, float], dict]:
        """Mean loss over a batch of scenes and its parameter gradients."""
        with Tape() as tape:
            parts: dict[str, Tensor] = {}
            total = None
            for ctx in ctxs:
                res = self.forward(ctx)
                for name, t in res.losses.items():
                    parts[name] = t if name not in parts else ad.add(parts[name], t)
                total = res.losses["total"] if total is None else ad.add(total, res.losses["total"])
            scale = Tensor(1.0 / len(ctxs))
            loss = ad.mul(total, scale)
            grads = ad.backward(tape, loss)
        values = {name: float(t.data) / len(ctxs) for name, t in parts.items()}
        return values, self.store.named_grads(grads)

    def confidence_image(self, ctx: SceneContext) -> np.ndarray:
        """Full-resolution vertex confidence raster, for rendering."""
        vertex_logits, _ = self._detector(ctx)
        return confidence_raster(heatmap_to_confidence(vertex_logits.data), self.bev)

    def save(self, path) -> None:
        save_checkpoint(self.store, path)

    def load(self, path) -> None:
        state = load_checkpoint(path)
        self.store.load_state(state)
