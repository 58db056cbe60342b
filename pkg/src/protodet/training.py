"""Two-stage fine-tuning: AdamW with parameter groups, gradient clipping,
structured loss records and a binary named-tensor checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig, from_dict
from .episodes import Episode
from .errors import BadConfigError, NonFiniteError
from .model import DiscreteCache, Detector, image_losses
from .rng import Rng
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PDCK\x01"


class AdamW:
    """Adam with decoupled weight decay. Each group is (named params, lr)."""

    def __init__(
        self,
        groups: list[tuple[list[tuple[str, Tensor]], float]],
        betas: tuple[float, float] = (0.9, 0.999),
        weight_decay: float = 1e-4,
        eps: float = 1e-8,
    ):
        self.groups = groups
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.lr_scale = 1.0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [item for named, _ in self.groups for item in named]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for named, lr in self.groups:
            for name, p in named:
                if p.grad is None:
                    continue
                g = p.grad
                m = self.m.get(name)
                if m is None:
                    m = self.m[name] = np.zeros_like(p.data)
                    self.v[name] = np.zeros_like(p.data)
                v = self.v[name]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data = p.data - lr * self.lr_scale * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.grad = None


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global l2 norm is at most ``max_norm``."""
    sq = sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)
    norm = float(np.sqrt(sq))
    if not np.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def stage_params(model: Detector, stage: int) -> list[tuple[str, Tensor]]:
    groups = model.param_groups()
    if stage == 1:
        return groups["backbone"] + groups["visual"]
    if stage == 2:
        return groups["backbone"] + groups["text"] + groups["visual"]
    raise BadConfigError(f"stage must be 1 or 2, got {stage}")


def make_optimizer(model: Detector, cfg: RunConfig, stage: int) -> AdamW:
    named = stage_params(model, stage)
    backbone = [(n, p) for n, p in named if n.startswith("backbone.")]
    rest = [(n, p) for n, p in named if not n.startswith("backbone.")]
    tc = cfg.train
    return AdamW([(backbone, tc.backbone_lr), (rest, tc.lr)], tuple(tc.betas), tc.weight_decay)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    optimizer: AdamW | None = None


def _batch(n: int, size: int, step: int) -> list[int]:
    if size <= 0 or size >= n:
        return list(range(n))
    return [(step * size + k) % n for k in range(size)]


def run_training(
    model: Detector,
    episode: Episode,
    cfg: RunConfig,
    stage: int,
    rng: Rng,
    steps: int | None = None,
    optimizer: AdamW | None = None,
    start_step: int = 0,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Fine-tune on the episode's annotated query images.

    Stage 1 optimises the backbone and visual branch on the visual loss only
    (the text branch is never run, so its parameters stay bitwise fixed).
    Stage 2 optimises everything on ``L_text + alpha * L_visual``.
    """
    if steps is None:
        steps = cfg.train.stage1_steps if stage == 1 else cfg.train.stage2_steps
    opt = optimizer or make_optimizer(model, cfg, stage)
    params = [p for _, p in opt.named_params()]
    branches = ("visual",) if stage == 1 else ("text", "visual")
    images = [q for q in episode.queries if q.annotations]
    if not images:
        raise BadConfigError("episode has no annotated query images to train on")
    alpha = cfg.match.branch_alpha
    result = TrainResult(optimizer=opt)

    def emit(rec: dict) -> None:
        result.records.append(rec)
        if log is not None:
            log(rec)

    frozen_protos = None
    if cfg.train.freeze_prototypes:
        with T.no_grad():
            frozen_protos = model.class_prototypes(episode.supports, episode.n_way)

    horizon = start_step + steps
    for step in range(start_step, start_step + steps):
        if cfg.train.schedule == "cosine":
            opt.lr_scale = 0.5 * (1.0 + np.cos(np.pi * step / max(horizon, 1)))
        step_rng = rng.child(f"stage{stage}:step{step}")
        try:
            opt.zero_grad()
            model.zero_grad()
            class_protos = frozen_protos if frozen_protos is not None else model.class_prototypes(
                episode.supports, episode.n_way
            )
            text_protos = model.text_prototypes(episode.class_names) if stage == 2 else None
            batch = [images[k] for k in _batch(len(images), cfg.train.batch_size, step)]
            total = Tensor(0.0)
            comps: dict[tuple[str, str], float] = {}
            for rec in batch:
                per = image_losses(model, rec, class_protos, text_protos, cfg, step_rng, branches)
                if stage == 1:
                    img_loss = per["visual"].loss
                else:
                    img_loss = per["text"].loss + per["visual"].loss * alpha
                total = total + img_loss * (1.0 / len(batch))
                for name, lb in per.items():
                    for comp, val in lb.records().items():
                        comps[(name, comp)] = comps.get((name, comp), 0.0) + val / len(batch)
            total.backward()
            grad_norm = clip_grad_norm(params, cfg.train.grad_clip)
            opt.step()
        except NonFiniteError as exc:
            emit({"stage": stage, "step": step, "event": "abort", "error": str(exc)})
            raise NonFiniteError(f"non-finite value at stage {stage} step {step}: {exc}") from exc
        value = total.item()
        result.losses.append(value)
        for (name, comp), val in comps.items():
            emit({"stage": stage, "step": step, "branch": name, "component": comp, "value": val})
        emit({"stage": stage, "step": step, "branch": "total", "component": "loss", "value": value})
        emit({"stage": stage, "step": step, "branch": "total", "component": "grad_norm", "value": grad_norm})
    return result


# -- checkpoints -------------------------------------------------------------
def save_checkpoint(
    path: str | Path,
    model: Detector,
    cfg: RunConfig,
    stage: int,
    step: int,
    optimizer: AdamW | None = None,
) -> Path:
    """Binary layout: magic, little-endian uint64 header length, UTF-8 JSON
    header, then every tensor as contiguous little-endian float64."""
    tensors: list[tuple[str, np.ndarray]] = list(model.state_dict().items())
    if optimizer is not None:
        for name in sorted(optimizer.m):
            tensors.append((f"optim.m.{name}", optimizer.m[name]))
            tensors.append((f"optim.v.{name}", optimizer.v[name]))
    entries, offset = [], 0
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format": "protodet-checkpoint",
        "version": 1,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "stage": stage,
        "step": step,
        "optimizer_t": optimizer.t if optimizer is not None else 0,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise BadConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise BadConfigError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + n].decode())
    base = pos + n
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return header, tensors


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> tuple[Detector, RunConfig, dict, AdamW | None]:
    """Rebuild the model (and optimizer moments, if stored). With ``cfg`` given,
    a config-hash mismatch is refused."""
    header, tensors = read_checkpoint(path)
    if cfg is not None and cfg.config_hash() != header["config_hash"]:
        raise BadConfigError(
            f"checkpoint config hash {header['config_hash']} does not match {cfg.config_hash()}"
        )
    run_cfg = cfg or from_dict(header["config"])
    model = Detector(run_cfg.model, run_cfg.seed)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})
    opt = None
    if header.get("optimizer_t", 0) > 0:
        opt = make_optimizer(model, run_cfg, header["stage"])
        opt.t = header["optimizer_t"]
        for k, v in tensors.items():
            if k.startswith("optim.m."):
                opt.m[k[len("optim.m.") :]] = v.copy()
            elif k.startswith("optim.v."):
                opt.v[k[len("optim.v.") :]] = v.copy()
    return model, run_cfg, header, opt
