"""Dense linear algebra helpers and the seeded random source.

Vectors and matrices are plain ``numpy.float64`` arrays. The random source
is numpy's Philox-4x64 counter-based generator (Salmon et al., 2011; rounds
= 10, key derived from the seed through ``SeedSequence``), which produces
the same stream on every platform numpy supports.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "ParameterError",
    "SeededRng",
    "as_vector",
    "as_matrix",
    "matvec",
    "gaussian_sample",
]


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class ParameterError(ValueError):
    """A scalar or count argument is outside its allowed range."""


def as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def as_matrix(values) -> np.ndarray:
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {m.shape} matrix by length-{v.shape[0]} vector")
    return m @ v


class SeededRng:
    """Single-owner random stream keyed by a 64-bit seed.

    ``child(*key)`` derives an independent stream from the same root seed, so
    per-node / per-round draws do not depend on the order in which other
    consumers pull numbers.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, self.key + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, mean: float, sigma: float, n: int) -> np.ndarray:
        return gaussian_sample(self, mean, sigma, n)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, population, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(population, size=size, replace=replace)

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(alpha)

    def random(self) -> float:
        return float(self._gen.random())


def gaussian_sample(rng: SeededRng, mean: float, sigma: float, n: int) -> np.ndarray:
    if sigma < 0 or not np.isfinite(sigma):
        raise ParameterError(f"sigma must be finite and >= 0, got {sigma}")
    if n < 0:
        raise ParameterError(f"n must be >= 0, got {n}")
    if sigma == 0:
        return np.full(n, float(mean))
    return rng.generator.normal(mean, sigma, n)
