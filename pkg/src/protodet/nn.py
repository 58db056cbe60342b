"""Small layer library on top of :mod:`protodet.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Module:
    """Parameters are Tensor attributes with ``requires_grad``; children are
    Module attributes or lists of Modules. Attribute order fixes naming order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng | None = None, bias: bool = True):
        if rng is None:
            w = np.zeros((d_in, d_out))
        else:
            bound = math.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, (d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def zero_(self) -> None:
        self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: Rng):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, d = x.shape
        return T.transpose(T.reshape(x, (n, self.n_heads, d // self.n_heads)), (1, 0, 2))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        n, d = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = (q @ T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d // self.n_heads))
        ctx = T.softmax(scores, axis=-1) @ v
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, d))
        return self.out_proj(merged)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: Rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def zero_output_projections(module: Module) -> None:
    """Zero every attention output projection and FFN output layer below ``module``."""
    stack = [module]
    while stack:
        m = stack.pop()
        if isinstance(m, MultiHeadAttention):
            m.out_proj.zero_()
        elif isinstance(m, FeedForward):
            m.fc2.zero_()
        for value in vars(m).values():
            if isinstance(value, Module):
                stack.append(value)
            elif isinstance(value, list):
                stack.extend(v for v in value if isinstance(v, Module))


def sinusoidal_embedding(boxes: np.ndarray, d: int, temperature: float = 100.0) -> np.ndarray:
    """Fixed sin/cos code of each cxcywh row; every coordinate gets d/4 channels."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    per = d // 4
    if per * 4 != d or per % 2:
        raise ValueError("embedding width must be a multiple of 8")
    dim_t = temperature ** (2 * (np.arange(per) // 2) / per)
    angles = boxes[:, :, None] * (2 * math.pi) / dim_t  # (n, 4, per)
    emb = np.empty_like(angles)
    emb[..., 0::2] = np.sin(angles[..., 0::2])
    emb[..., 1::2] = np.cos(angles[..., 1::2])
    return emb.reshape(boxes.shape[0], d)


def sinusoidal_tensor(boxes: Tensor, d: int, temperature: float = 100.0) -> Tensor:
    """Differentiable version of :func:`sinusoidal_embedding` for n x 4 box tensors."""
    out = sinusoidal_embedding(boxes.data, d, temperature)
    n, per = boxes.shape[0], d // 4
    freq = (2 * math.pi) / temperature ** (2 * (np.arange(per) // 2) / per)

    def backward(g):
        angles = boxes.data[:, :, None] * freq
        slope = np.empty_like(angles)
        slope[..., 0::2] = np.cos(angles[..., 0::2])
        slope[..., 1::2] = -np.sin(angles[..., 1::2])
        return ((g.reshape(n, 4, per) * slope * freq).sum(axis=2),)

    return T._make(out, (boxes,), backward)
