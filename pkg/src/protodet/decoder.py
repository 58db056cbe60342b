"""Branch decoder: query self-attention, image and guidance cross-attention,
cosine classification against prototypes, and iterative box refinement."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .enhancer import ANCHOR_MIN_EXTENT, AnchorHead, EnhancerStack, QuerySeeds, new_content
from .geometry import Box
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param, sinusoidal_embedding, sinusoidal_tensor
from .rng import Rng
from .tensor import Tensor

REFINE_EPS = 1e-5


def compute_logits(queries: Tensor, protos: Tensor, w_cls: Tensor, alpha: float, tau: float) -> Tensor:
    """Scaled cosine between projected queries and prototype rows; n_q x C."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    projected = T.l2_normalize(queries @ w_cls)
    return (projected @ T.transpose(T.l2_normalize(protos))) * (alpha / tau)


def _logit(x: Tensor) -> Tensor:
    x = T.clamp(x, REFINE_EPS, 1.0 - REFINE_EPS)
    return T.log(x) - T.log(1.0 - x)


def refine_boxes(boxes: Tensor, delta: Tensor) -> Tensor:
    """Apply deltas in inverse-sigmoid space to n x 4 cxcywh boxes."""
    b = T.sigmoid(_logit(boxes) + delta)
    return T.concat([b[:, 0:2], T.clamp(b[:, 2:4], ANCHOR_MIN_EXTENT)], axis=1)


def box_refine_step(b: Box, delta) -> Box:
    with T.no_grad():
        out = refine_boxes(Tensor(b.as_array()[None, :]), Tensor(np.reshape(delta, (1, 4))))
    return Box(*out.data[0])


class DecoderLayer(Module):
    def __init__(self, d: int, n_heads: int, ffn_dim: int, rng: Rng):
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.norm2 = LayerNorm(d)
        self.image_attn = MultiHeadAttention(d, n_heads, rng)
        self.norm3 = LayerNorm(d)
        self.guide_attn = MultiHeadAttention(d, n_heads, rng)
        self.norm4 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_dim, rng)

    def __call__(self, q: Tensor, pos: Tensor, memory: Tensor, memory_pos: Tensor, guidance: Tensor) -> Tensor:
        h = self.norm1(q)
        q = q + self.self_attn(h + pos, h + pos, h)
        h = self.norm2(q)
        q = q + self.image_attn(h + pos, memory + memory_pos, memory)
        h = self.norm3(q)
        q = q + self.guide_attn(h + pos, guidance, guidance)
        return q + self.ffn(self.norm4(q))


class Heads(Module):
    def __init__(self, d: int, rng: Rng):
        self.norm = LayerNorm(d)
        self.w_cls = param(rng.uniform(-np.sqrt(3.0 / d), np.sqrt(3.0 / d), (d, d)))
        self.box_hidden = Linear(d, d, rng)
        self.box_out = Linear(d, 4, rng)
        # start refinement from the seed anchors
        self.box_out.zero_()

    def deltas(self, h: Tensor) -> Tensor:
        return self.box_out(T.gelu(self.box_hidden(h)))


class DecoderStack(Module):
    def __init__(
        self,
        d: int,
        n_heads: int,
        ffn_dim: int,
        n_layers: int,
        rng: Rng,
        per_layer_heads: bool = False,
    ):
        self.layers = [DecoderLayer(d, n_heads, ffn_dim, rng) for _ in range(n_layers)]
        self.heads = [Heads(d, rng) for _ in range(n_layers if per_layer_heads else 1)]

    def head(self, layer: int) -> Heads:
        return self.heads[layer if len(self.heads) > 1 else 0]


@dataclass
class BranchOutput:
    logits: list[Tensor]  # per layer, n_q x C
    boxes: list[Tensor]  # per layer, n_q x 4 cxcywh
    hidden: list[Tensor] = field(default_factory=list)  # per layer, normalised query states

    @property
    def final(self) -> int:
        return len(self.logits) - 1

    def box_list(self, layer: int = -1) -> list[Box]:
        return [Box(*row) for row in self.boxes[layer].data]


def decode_branch(
    seeds: QuerySeeds,
    memory: Tensor,
    guidance: Tensor,
    stack: DecoderStack,
    protos: Tensor,
    alpha: float = 1.0,
    tau: float = 0.1,
    memory_cells: np.ndarray | None = None,
) -> BranchOutput:
    """Decode seeds layer by layer, emitting logits and refined boxes at each layer."""
    d = memory.shape[1]
    memory_pos = Tensor(
        np.zeros(memory.shape) if memory_cells is None else sinusoidal_embedding(memory_cells, d)
    )
    q = seeds.content + sinusoidal_tensor(seeds.anchors, d)
    boxes = seeds.anchors
    out = BranchOutput([], [], [])
    for i, layer in enumerate(stack.layers):
        pos = sinusoidal_tensor(boxes, d)
        q = layer(q, pos, memory, memory_pos, guidance)
        heads = stack.head(i)
        h = heads.norm(q)
        out.logits.append(compute_logits(h, protos, heads.w_cls, alpha, tau))
        boxes = refine_boxes(boxes, heads.deltas(h))
        out.boxes.append(boxes)
        out.hidden.append(h)
    return out


class Branch(Module):
    """Everything one guidance branch owns: enhancer, anchor head, content seed, decoder."""

    def __init__(
        self,
        d: int,
        n_heads: int,
        ffn_dim: int,
        enc_layers: int,
        dec_layers: int,
        rng: Rng,
        per_layer_heads: bool = False,
    ):
        self.enhancer = EnhancerStack(d, n_heads, ffn_dim, enc_layers, rng.child("enhancer"))
        self.anchor_head = AnchorHead(d, rng.child("anchor"))
        self.anchor_head.proj.zero_()
        self.content = new_content(d, rng.child("content"))
        self.decoder = DecoderStack(d, n_heads, ffn_dim, dec_layers, rng.child("decoder"), per_layer_heads)


def clone_weights(src: Branch) -> Branch:
    """Deep copy with fresh parameter storage; later updates stay independent."""
    dst = copy.deepcopy(src)
    for p in dst.parameters():
        p.grad = None
    return dst
