"""Seeded, label-splittable random streams."""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label) -> int:
    return zlib.crc32(str(label).encode("utf-8"))


class Rng:
    """A reproducible normal/uniform stream.

    ``split(label)`` derives an independent child stream whose state depends
    only on the parent seed path and the label, never on how much the parent
    has already been consumed.
    """

    def __init__(self, seed: int = 0, _path: tuple = ()):
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, label) -> "Rng":
        return Rng(self.seed, self._path + (_label_key(label),))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"
