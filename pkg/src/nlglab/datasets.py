"""Toy labeled datasets and their exact mixture oracles."""
from __future__ import annotations

import numpy as np

from .models.analytic import AnalyticMixtureModel
from .numerics import RngStream
from .schedules import NoiseSchedule


def ring_means(num_classes: int = 8, radius: float = 4.0) -> np.ndarray:
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def line_means(dim: int = 1, offset: float = 2.0) -> np.ndarray:
    """Two class means at -offset and +offset along the first axis of ``dim``-space."""
    means = np.zeros((2, dim))
    means[0, 0] = -offset
    means[1, 0] = offset
    return means


def mixture_oracle(means, std, schedule: NoiseSchedule, weights=None) -> AnalyticMixtureModel:
    means = np.asarray(means, dtype=np.float64)
    k = len(means)
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    return AnalyticMixtureModel(means, w, float(std) ** 2, schedule)


def ring_oracle(schedule: NoiseSchedule, num_classes=8, radius=4.0, std=1.0) -> AnalyticMixtureModel:
    return mixture_oracle(ring_means(num_classes, radius), std, schedule)


def line_oracle(schedule: NoiseSchedule, dim=1, offset=2.0, std=1.0) -> AnalyticMixtureModel:
    return mixture_oracle(line_means(dim, offset), std, schedule)


def sample_mixture(means, std, n: int, rng: RngStream):
    """Balanced labeled draws: returns (X, labels)."""
    means = np.asarray(means, dtype=np.float64)
    labels = rng.integers(0, len(means), size=n)
    x = means[labels] + std * rng.normal((n, means.shape[1]))
    return x, labels


def make_ring(n: int, seed: int = 0, num_classes=8, radius=4.0, std=1.0):
    return sample_mixture(ring_means(num_classes, radius), std, n, RngStream.derive(seed, "ring", n))


def make_line(n: int, seed: int = 0, dim=1, offset=2.0, std=1.0):
    return sample_mixture(line_means(dim, offset), std, n, RngStream.derive(seed, "line", n))


DATASETS = {"ring": make_ring, "line": make_line}
ORACLES = {"ring": ring_oracle, "line": line_oracle}
