"""Reference estimators and the naive pruning step for bounded covariance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import DimensionMismatch, EmptyInput, SampleSet

# Pruning radius is PRUNE_FACTOR * sqrt(d / eps) * sigma.
PRUNE_FACTOR = 4.0


@dataclass(frozen=True)
class PruneResult:
    pruned: SampleSet
    replaced_count: int
    center: np.ndarray
    radius: float
    replaced_mask: np.ndarray


def _as_matrix(samples: SampleSet | np.ndarray) -> np.ndarray:
    x = samples.data if isinstance(samples, SampleSet) else np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("need at least one sample")
    return x


def empirical_mean(samples: SampleSet | np.ndarray) -> np.ndarray:
    return _as_matrix(samples).mean(axis=0)


def coordinatewise_median(samples: SampleSet | np.ndarray) -> np.ndarray:
    """Per-coordinate lower median, by selection rather than sorting."""
    x = _as_matrix(samples)
    k = (x.shape[0] - 1) // 2
    return np.partition(x, k, axis=0)[k].copy()


def prune_radius(d: int, eps: float, sigma: float = 1.0) -> float:
    return PRUNE_FACTOR * math.sqrt(d / eps) * sigma


def prune(split_a: SampleSet, split_b: SampleSet, eps: float, sigma: float = 1.0,
          *, center: np.ndarray | None = None, radius: float | None = None) -> PruneResult:
    """Replace rows of ``split_b`` far from the median of ``split_a`` by that median.

    ``center`` and ``radius`` may be passed to re-apply an earlier pruning.
    """
    if split_a.dim != split_b.dim:
        raise DimensionMismatch(f"splits have dims {split_a.dim} and {split_b.dim}")
    if center is None:
        center = coordinatewise_median(split_a)
    if radius is None:
        radius = prune_radius(split_b.dim, eps, sigma)
    x = np.array(split_b.data)
    far = np.linalg.norm(x - center, axis=1) > radius
    x[far] = center
    return PruneResult(SampleSet(x), int(far.sum()), np.asarray(center), float(radius), far)
