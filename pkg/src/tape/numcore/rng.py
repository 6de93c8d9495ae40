"""Counter-based deterministic random streams."""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """A Philox stream keyed by ``(seed, stream)``.

    Philox is counter based, so the same key yields the same sequence on every
    platform, and distinct stream ids give independent streams.
    """

    def __init__(self, seed: int = 0, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64)))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def spawn(self, stream: int) -> "Rng":
        """Independent stream sharing this seed."""
        return Rng(self.seed, stream)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, shape)

    def integer(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)
