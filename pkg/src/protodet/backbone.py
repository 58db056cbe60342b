"""Toy multi-scale image encoder and frozen text-embedding stand-in."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BadShapeError, DuplicateClassError
from .nn import Linear, Module, param
from .rng import Rng
from .tensor import Tensor

PATCH = 8
N_LEVELS = 4


@dataclass
class FeaturePyramid:
    """Level-major list of token maps; ``tokens[l]`` is (H_l * W_l) x D, row-major."""

    tokens: list[Tensor]
    sizes: list[tuple[int, int]]
    image_size: tuple[int, int]

    @property
    def d_model(self) -> int:
        return self.tokens[0].shape[1]

    def level(self, idx: int) -> Tensor:
        """Level ``idx`` as a D x H x W map."""
        h, w = self.sizes[idx]
        return T.reshape(T.transpose(self.tokens[idx]), (self.d_model, h, w))

    @property
    def levels(self) -> list[Tensor]:
        return [self.level(i) for i in range(len(self.tokens))]


def _patchify(image: np.ndarray) -> tuple[np.ndarray, int, int]:
    c, h, w = image.shape
    ph, pw = -h % PATCH, -w % PATCH
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
    gh, gw = image.shape[1] // PATCH, image.shape[2] // PATCH
    patches = image.reshape(c, gh, PATCH, gw, PATCH).transpose(1, 3, 0, 2, 4)
    return patches.reshape(gh * gw, c * PATCH * PATCH), gh, gw


def _merge_2x2(tokens: Tensor, h: int, w: int) -> tuple[Tensor, int, int]:
    """Concatenate each 2x2 neighbourhood (zero-padded at odd edges) into one 4D token."""
    d = tokens.shape[1]
    grid = T.reshape(tokens, (h, w, d))
    if h % 2 or w % 2:
        grid = T.concat([grid, Tensor(np.zeros((h % 2, w, d)))], axis=0) if h % 2 else grid
        hh = grid.shape[0]
        grid = T.concat([grid, Tensor(np.zeros((hh, w % 2, d)))], axis=1) if w % 2 else grid
    hh, ww = grid.shape[0] // 2, grid.shape[1] // 2
    blocks = T.transpose(T.reshape(grid, (hh, 2, ww, 2, d)), (0, 2, 1, 3, 4))
    return T.reshape(blocks, (hh * ww, 4 * d)), hh, ww


class Backbone(Module):
    """Patch-embedding stem (stride 8) followed by three 2x2 patch-merging stages."""

    def __init__(self, d_model: int, rng: Rng):
        self.stem1 = Linear(3 * PATCH * PATCH, d_model, rng)
        self.stem2 = Linear(d_model, d_model, rng)
        self.merges = [Linear(4 * d_model, d_model, rng) for _ in range(N_LEVELS - 1)]

    def __call__(self, image: np.ndarray | Tensor) -> FeaturePyramid:
        return extract_pyramid(image, self)


def extract_pyramid(image: np.ndarray | Tensor, backbone: Backbone) -> FeaturePyramid:
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise BadShapeError(f"expected a 3 x H x W image, got shape {img.shape}")
    patches, h, w = _patchify(img)
    x = T.gelu(backbone.stem2(T.gelu(backbone.stem1(Tensor(patches)))))
    tokens, sizes = [x], [(h, w)]
    for merge in backbone.merges:
        merged, h, w = _merge_2x2(x, h, w)
        x = T.gelu(merge(merged))
        tokens.append(x)
        sizes.append((h, w))
    return FeaturePyramid(tokens, sizes, (img.shape[1], img.shape[2]))


@dataclass
class TokenIndex:
    """Maps flat token positions back to ``(level, y, x)`` and carries cell geometry."""

    entries: np.ndarray  # (N_I, 3) int: level, y, x
    cells: np.ndarray  # (N_I, 4) cxcywh of each token's cell, normalised
    sizes: list[tuple[int, int]] = field(default_factory=list)

    def flat_index(self, level: int, y: int, x: int) -> int:
        offset = sum(h * w for h, w in self.sizes[:level])
        return offset + y * self.sizes[level][1] + x


def tokenize_pyramid(p: FeaturePyramid) -> tuple[Tensor, TokenIndex]:
    """Level-major, row-major concatenation of all levels into N_I x D tokens."""
    entries, cells = [], []
    img_h, img_w = p.image_size
    for lvl, (h, w) in enumerate(p.sizes):
        stride = PATCH * 2**lvl
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        ys, xs = ys.ravel(), xs.ravel()
        entries.append(np.stack([np.full_like(ys, lvl), ys, xs], axis=1))
        cw, ch = min(1.0, stride / img_w), min(1.0, stride / img_h)
        cx = np.clip((xs + 0.5) * stride / img_w, 0.0, 1.0)
        cy = np.clip((ys + 0.5) * stride / img_h, 0.0, 1.0)
        cells.append(np.stack([cx, cy, np.full(cx.shape, cw), np.full(cy.shape, ch)], axis=1))
    index = TokenIndex(np.concatenate(entries), np.concatenate(cells), list(p.sizes))
    return T.concat(p.tokens, axis=0), index


def untokenize(tokens: Tensor, index: TokenIndex) -> list[Tensor]:
    """Split N_I x D tokens back into per-level token blocks."""
    out, start = [], 0
    for h, w in index.sizes:
        out.append(tokens[start : start + h * w])
        start += h * w
    return out


# -- text prototypes -------------------------------------------------------
@dataclass
class TextPrototypes:
    raw: Tensor
    projected: Tensor
    class_names: list[str]
    tau_t: float


def raw_text_embedding(name: str, d_text: int, salt: str = "protodet-text") -> np.ndarray:
    """Frozen per-name vector drawn from a stream seeded by a hash of ``salt`` and ``name``."""
    digest = hashlib.sha256(f"{salt}\x00{name}".encode()).digest()
    rng = Rng(int.from_bytes(digest[:8], "little"))
    return rng.normal(0.0, 1.0 / np.sqrt(d_text), d_text)


def embed_text(
    class_names: list[str], tau_t: float, w_t: Tensor, salt: str = "protodet-text"
) -> TextPrototypes:
    """Project frozen name embeddings to the detector width and normalise each row."""
    if not class_names:
        raise ValueError("need at least one class name")
    if len(set(class_names)) != len(class_names):
        raise DuplicateClassError(f"repeated class names in {class_names}")
    if tau_t <= 0:
        raise ValueError("tau_t must be positive")
    d_text = w_t.shape[0]
    raw = Tensor(np.stack([raw_text_embedding(n, d_text, salt) for n in class_names]))
    projected = T.l2_normalize((raw @ w_t) * (1.0 / tau_t))
    return TextPrototypes(raw, projected, list(class_names), tau_t)


class TextProjection(Module):
    def __init__(self, d_text: int, d_model: int, rng: Rng):
        self.w_t = param(rng.normal(0.0, 1.0 / np.sqrt(d_text), (d_text, d_model)))
