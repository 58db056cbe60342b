"""Bidirectional image/guidance feature enhancer and Top-N query selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyGuidanceError
from .geometry import Box
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param, sinusoidal_embedding
from .rng import Rng
from .tensor import Tensor

ANCHOR_MIN_EXTENT = 1e-4
_LOGIT_CLIP = 1e-4


class EnhancerLayer(Module):
    def __init__(self, d: int, n_heads: int, ffn_dim: int, rng: Rng):
        self.norm_x1 = LayerNorm(d)
        self.self_x = MultiHeadAttention(d, n_heads, rng)
        self.norm_g1 = LayerNorm(d)
        self.self_g = MultiHeadAttention(d, n_heads, rng)
        self.norm_x2 = LayerNorm(d)
        self.norm_g2 = LayerNorm(d)
        self.cross_xg = MultiHeadAttention(d, n_heads, rng)
        self.cross_gx = MultiHeadAttention(d, n_heads, rng)
        self.norm_x3 = LayerNorm(d)
        self.ffn_x = FeedForward(d, ffn_dim, rng)
        self.norm_g3 = LayerNorm(d)
        self.ffn_g = FeedForward(d, ffn_dim, rng)

    def __call__(self, x: Tensor, g: Tensor, pos: Tensor) -> tuple[Tensor, Tensor]:
        # pre-norm residual blocks; positions enter queries/keys on the image side only
        h = self.norm_x1(x)
        x = x + self.self_x(h + pos, h + pos, h)
        h = self.norm_g1(g)
        g = g + self.self_g(h, h, h)
        hx, hg = self.norm_x2(x), self.norm_g2(g)
        x, g = (
            x + self.cross_xg(hx + pos, hg, hg),
            g + self.cross_gx(hg, hx + pos, hx),
        )
        x = x + self.ffn_x(self.norm_x3(x))
        g = g + self.ffn_g(self.norm_g3(g))
        return x, g


class EnhancerStack(Module):
    def __init__(self, d: int, n_heads: int, ffn_dim: int, n_layers: int, rng: Rng):
        self.layers = [EnhancerLayer(d, n_heads, ffn_dim, rng) for _ in range(n_layers)]


def enhance(
    tokens: Tensor, guidance: Tensor, stack: EnhancerStack, token_cells: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Run the stack; returns prototype-aware image tokens and adapted guidance."""
    if guidance.shape[0] == 0:
        raise EmptyGuidanceError("guidance sequence is empty")
    if tokens.shape[1] != guidance.shape[1]:
        raise ValueError(f"width mismatch: {tokens.shape[1]} vs {guidance.shape[1]}")
    d = tokens.shape[1]
    pos = Tensor(
        np.zeros(tokens.shape) if token_cells is None else sinusoidal_embedding(token_cells, d)
    )
    x, g = tokens, guidance
    for layer in stack.layers:
        x, g = layer(x, g, pos)
    return x, g


def token_scores(x_enh: Tensor | np.ndarray, guidance: Tensor | np.ndarray) -> np.ndarray:
    """Max cosine similarity of each image token to any guidance token."""
    x = x_enh.data if isinstance(x_enh, Tensor) else np.asarray(x_enh)
    g = guidance.data if isinstance(guidance, Tensor) else np.asarray(guidance)
    with T.no_grad():
        sim = T.cosine_sim_matrix(Tensor(x), Tensor(g)).data
    return sim.max(axis=1)


def top_indices(scores: np.ndarray, n_q: int) -> np.ndarray:
    """Indices of the ``n_q`` largest scores, best first; ties go to the lower index."""
    if n_q < 1:
        raise ValueError("n_q must be >= 1")
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:n_q]


def select_queries(x_enh: Tensor, guidance: Tensor, n_q: int) -> np.ndarray:
    return top_indices(token_scores(x_enh, guidance), n_q)


@dataclass(frozen=True)
class QuerySeed:
    anchor: Box
    content: np.ndarray
    pos_embed: np.ndarray
    source_token: int


@dataclass
class QuerySeeds:
    """Batched seeds: anchors as logits (differentiable), shared content, fixed positions."""

    anchor_logits: Tensor  # n_q x 4, inverse-sigmoid of the anchor boxes
    anchors: Tensor  # n_q x 4 cxcywh
    content: Tensor  # n_q x D
    pos_embed: np.ndarray  # n_q x D
    source_tokens: np.ndarray

    def __len__(self) -> int:
        return len(self.source_tokens)

    def seeds(self) -> list[QuerySeed]:
        return [
            QuerySeed(
                Box(*self.anchors.data[i]),
                self.content.data[i].copy(),
                self.pos_embed[i].copy(),
                int(self.source_tokens[i]),
            )
            for i in range(len(self))
        ]


def inverse_sigmoid(x: np.ndarray, eps: float = _LOGIT_CLIP) -> np.ndarray:
    x = np.clip(x, eps, 1 - eps)
    return np.log(x / (1 - x))


def anchor_boxes(logits: Tensor) -> Tensor:
    """Sigmoid to cxcywh with the extent floored at 1e-4."""
    b = T.sigmoid(logits)
    return T.concat([b[:, 0:2], T.clamp(b[:, 2:4], ANCHOR_MIN_EXTENT)], axis=1)


class AnchorHead(Module):
    def __init__(self, d: int, rng: Rng | None):
        self.proj = Linear(d, 4, rng)


def init_query_seeds(
    selected: np.ndarray,
    x_enh: Tensor,
    anchor_head: AnchorHead,
    content: Tensor,
    token_cells: np.ndarray,
) -> QuerySeeds:
    """Dynamic anchors from the selected tokens plus one shared content vector.

    The centre is offset in logit space from the token's cell centre; the
    extent is ``sigmoid(head)`` directly.
    """
    selected = np.asarray(selected, dtype=int)
    if selected.size == 0:
        raise ValueError("no tokens selected")
    d = x_enh.shape[1]
    base = np.zeros((selected.size, 4))
    base[:, :2] = inverse_sigmoid(token_cells[selected, :2])
    logits = anchor_head.proj(x_enh[selected]) + Tensor(base)
    anchors = anchor_boxes(logits)
    pos = sinusoidal_embedding(anchors.data, d)
    cnt = T.reshape(content, (1, d)) * Tensor(np.ones((selected.size, 1)))
    return QuerySeeds(logits, anchors, cnt, pos, selected)


def new_content(d: int, rng: Rng):
    return param(rng.normal(0.0, 0.02, d))
