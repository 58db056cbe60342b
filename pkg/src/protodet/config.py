"""Run configuration: one nested, versioned structure loaded from YAML or JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import BadConfigError
from .geometry import JitterParams
from .matching import MatchConfig

CONFIG_VERSION = 1
STYLES = ("photo-like", "cartoon-like", "texture-defect", "low-contrast")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    enc_layers: int = 6
    dec_layers: int = 3
    d_text: int = 32
    n_q: int = 50
    tau_t: float = 0.1
    alpha_txt: float = 1.0
    alpha_vis: float = 1.0
    tau_txt: float = 0.1
    tau_vis: float = 0.1
    proto_level: int = 0
    neg_level: int = 0
    roi_size: int = 7
    roi_sampling: int = 2
    per_layer_heads: bool = False
    text_salt: str = "protodet-text"


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 3
    shots: int = 5
    n_query: int = 4
    image_size: int = 64
    style: str = "photo-like"
    max_objects: int = 3


@dataclass(frozen=True)
class TrainConfig:
    stage1_steps: int = 100
    stage2_steps: int = 100
    lr: float = 1e-4
    backbone_lr: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 0.1
    batch_size: int = 0  # query images per step; 0 means all
    freeze_prototypes: bool = False
    schedule: str = "constant"  # or "cosine" (decay to 0 over the stage)


@dataclass(frozen=True)
class EvalConfig:
    topk: int = 100
    nms_iou: float = 0.5
    ensemble: str = "union"  # or "score_avg"
    iou_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    jitter: JitterParams = field(default_factory=JitterParams)
    match: MatchConfig = field(default_factory=MatchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **overrides: Any) -> RunConfig:
        """Override dotted keys, e.g. ``replace(**{"jitter.n_neg": 0})``."""
        data = self.to_dict()
        for key, value in overrides.items():
            node = data
            *parents, leaf = key.split(".")
            for part in parents:
                if part not in node or not isinstance(node[part], dict):
                    raise BadConfigError(f"unknown config key {key!r}")
                node = node[part]
            if leaf not in node:
                raise BadConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return from_dict(data)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise BadConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise BadConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise BadConfigError(f"{sub} must be a boolean")
            kwargs[name] = value
        elif isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise BadConfigError(f"{sub} must be numeric")
        elif isinstance(default, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise BadConfigError(f"invalid {path or 'config'}: {exc}") from exc


def from_dict(data: dict[str, Any]) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.version != CONFIG_VERSION:
        raise BadConfigError(f"unsupported config version {cfg.version}")
    m = cfg.model
    if m.d_model % m.n_heads or m.d_model % 8:
        raise BadConfigError("d_model must be divisible by n_heads and by 8")
    if not 0 <= m.proto_level <= 3 or not 0 <= m.neg_level <= 3:
        raise BadConfigError("pyramid levels are 0..3")
    if m.n_q < 1 or m.enc_layers < 0 or m.dec_layers < 1:
        raise BadConfigError("need n_q >= 1, enc_layers >= 0, dec_layers >= 1")
    if cfg.episode.style not in STYLES:
        raise BadConfigError(f"style must be one of {STYLES}")
    if cfg.eval.ensemble not in ("union", "score_avg"):
        raise BadConfigError("eval.ensemble must be 'union' or 'score_avg'")
    if cfg.train.schedule not in ("constant", "cosine"):
        raise BadConfigError("train.schedule must be 'constant' or 'cosine'")
    if cfg.episode.n_way < 1 or cfg.episode.shots < 1:
        raise BadConfigError("need n_way >= 1 and shots >= 1")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise BadConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
