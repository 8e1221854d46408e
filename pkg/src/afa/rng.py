"""Counter-based random streams with named substreams.

Every random draw in the project flows through an `Rng`. Substreams are
derived from a root seed plus a path of labels (strings or ints), so the
draws consumed by one purpose (parameter init, episode sampling, data
generation, ...) never depend on how many draws another purpose made or
on evaluation order.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"substream labels must be nonnegative, got {label}")
        return int(label)
    if isinstance(label, str):
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"substream label must be str or int, got {type(label).__name__}")


class Rng:
    """Deterministic random stream backed by a Philox counter generator.

    Identical (seed, path) pairs produce identical draw sequences on any
    platform; `substream` derives an independent child stream without
    consuming draws from the parent.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = _path
        ss = np.random.SeedSequence(self.seed, spawn_key=_path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *labels) -> "Rng":
        """Child stream keyed by the label path; independent of sibling streams."""
        return Rng(self.seed, self.path + tuple(_label_to_int(x) for x in labels))

    def normal(self, mean: float, std: float, shape=()) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
