"""Random streams, Gaussian draws and small vector helpers.

All randomness goes through :class:`RngStream`, a thin wrapper around numpy's
Philox4x64 counter-based generator. The 128-bit Philox key is the pair
``(seed, stream_id)``, so every (experiment, seed, item, purpose) tuple gets an
independent stream without any coordination between workers.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

_U64 = (1 << 64) - 1


def stream_id(*path) -> int:
    """Hash an arbitrary path of ints/strings into a 64-bit stream id."""
    h = hashlib.blake2b(digest_size=8)
    for part in path:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    """Single-owner random stream keyed by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & _U64
        self.stream_id = int(self.stream_id) & _U64
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        self._gen = np.random.Generator(bitgen)

    @classmethod
    def derive(cls, seed: int, *path) -> "RngStream":
        return cls(seed, stream_id(*path))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)


def sample_gaussian(dim: int, variance: float, rng: RngStream) -> np.ndarray:
    """Draw ``dim`` i.i.d. samples from N(0, variance)."""
    if int(dim) != dim or dim <= 0:
        raise ValueError(f"dim must be a positive integer, got {dim!r}")
    if variance < 0 or not np.isfinite(variance):
        raise ValueError(f"variance must be finite and >= 0, got {variance!r}")
    if variance == 0:
        return np.zeros(int(dim))
    return np.sqrt(variance) * rng.normal(int(dim))


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    return float(row_norms(v[None])[0])


def row_norms(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def linear_combine(coeffs, vectors) -> np.ndarray:
    """Return ``sum(c * v for c, v in zip(coeffs, vectors))``."""
    coeffs = list(coeffs)
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vectors or len(coeffs) != len(vectors):
        raise ValueError("coeffs and vectors must be nonempty and of equal length")
    shape = vectors[0].shape
    for v in vectors[1:]:
        if v.shape != shape:
            raise ValueError(f"shape mismatch: {v.shape} vs {shape}")
    out = coeffs[0] * vectors[0]
    for c, v in zip(coeffs[1:], vectors[1:]):
        out = out + c * v
    return out
