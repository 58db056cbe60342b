"""Seeded random streams.

Backed by numpy's counter-based Philox bit generator, so a given seed yields
the same draws on every platform. Call sites receive an :class:`Rng`
explicitly; nothing here touches global state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, key: str | int) -> Rng:
        """Independent stream keyed by ``(seed, key)``; does not advance this stream."""
        return Rng(_derive_seed(self.seed, str(key)))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        return self._gen.uniform(lo, hi, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, lo: int, hi: int | None = None, size=None):
        return self._gen.integers(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
