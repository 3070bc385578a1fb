"""Seeded, platform-stable random streams.

Backed by numpy's Philox counter-based bit generator, whose output is
specified bit-for-bit independent of platform.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, *key: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *key: int) -> "Rng":
        """Independent stream derived from (seed, key + extra key)."""
        return Rng(self.seed, *self.key, *key)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        """Integers in [low, high)."""
        return self.generator.integers(low, high, size)

    def random(self) -> float:
        return float(self.generator.random())

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int) -> int:
        return int(self.generator.integers(0, n))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"
