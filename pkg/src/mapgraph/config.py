"""Run configuration: one flat JSON document drives every command.

Defaults describe the full-scale setup (30 m x 60 m range at 0.15 m,
400 vertex slots).  ``RunConfig.desk()`` is the small profile used for
fast CPU experiments and most of the test suite.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .geometry import BevConfig

CONFIG_VERSION = 1

DIAG_MODES = ("neg", "zero")
SCORE_NORMS = ("scaled_dot", "cosine")


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    # perception range and raster
    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = -30.0
    y_max: float = 30.0
    resolution: float = 0.15
    bev_channels: int = 8
    bev_noise: float = 0.1
    # vertex budget and extraction
    capacity: int = 400
    conf_threshold: float = 0.01
    # embedding and graph network
    embed_dim: int = 64
    pe_bands: int = 10
    gnn_layers: int = 7
    gnn_heads: int = 4
    # matching
    sinkhorn_iters: int = 100
    tau_adj: float = 0.2
    match_d0: float = 4.0
    diag_mode: str = "neg"
    score_norm: str = "scaled_dot"
    # loss weights
    lambda_vertex: float = 1.0
    lambda_dt: float = 1.0
    lambda_adj: float = 0.005
    lambda_cls: float = 0.01
    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_steps: int = 20000
    batch_size: int = 1
    eval_every: int = 500
    early_stop_train_map: float = 0.0
    early_stop_val_map: float = 0.0
    augment: bool = True
    augment_prob: float = 0.5
    augment_jitter_m: float = 0.25
    # evaluation
    ap_thresholds: tuple[float, ...] = (0.5, 1.0, 1.5)
    sample_spacing: float = 0.15
    # ablation switches
    disable_pe: bool = False
    disable_dt_embed: bool = False
    oracle_detector: bool = False

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version!r}")
        if self.diag_mode not in DIAG_MODES:
            raise ConfigError(f"diag_mode must be one of {DIAG_MODES}")
        if self.score_norm not in SCORE_NORMS:
            raise ConfigError(f"score_norm must be one of {SCORE_NORMS}")
        for name in ("capacity", "embed_dim", "pe_bands", "gnn_layers", "gnn_heads",
                     "sinkhorn_iters", "train_steps", "batch_size", "eval_every",
                     "bev_channels"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("resolution", "lr", "match_d0", "sample_spacing"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.embed_dim % self.gnn_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by gnn_heads {self.gnn_heads}"
            )
        if not 0.0 <= self.tau_adj <= 1.0:
            raise ConfigError("tau_adj must be in [0, 1]")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ConfigError("augment_prob must be in [0, 1]")
        if not self.ap_thresholds or any(t <= 0 for t in self.ap_thresholds):
            raise ConfigError("ap_thresholds must be positive")
        object.__setattr__(self, "ap_thresholds", tuple(float(t) for t in self.ap_thresholds))
        self.bev()  # validates range/resolution/divisibility

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Small grid profile: 64 x 128 pixels, 64 vertex slots."""
        base = dict(x_min=-4.8, x_max=4.8, y_min=-9.6, y_max=9.6, capacity=64)
        base.update(overrides)
        return cls(**base)

    def bev(self) -> BevConfig:
        return BevConfig(
            x_range=(self.x_min, self.x_max),
            y_range=(self.y_min, self.y_max),
            resolution=self.resolution,
        )

    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda_vertex, self.lambda_dt, self.lambda_adj, self.lambda_cls)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ap_thresholds"] = list(self.ap_thresholds)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        if "version" not in doc:
            raise ConfigError("config is missing required key 'version'")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(doc)
        if "ap_thresholds" in kwargs:
            try:
                kwargs["ap_thresholds"] = tuple(float(t) for t in kwargs["ap_thresholds"])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad ap_thresholds: {e}") from e
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"bad config value: {e}") from e


def load_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return RunConfig.from_dict(doc)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
