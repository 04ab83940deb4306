"""Uniform lattice of preference weight vectors on the unit simplex.

One weight vector per merging subproblem: the lattice points (i_1/q, ...,
i_K/q) with i_1 + ... + i_K = q enumerate every preference the pipeline
optimizes for. The lattice has C(K+q-1, K-1) points.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import DomainError

__all__ = ["WeightVector", "generate_simplex", "simplex_size", "uniform_weights"]


@dataclass(frozen=True)
class WeightVector:
    """A point on the K-simplex plus its 1-based position in the lattice."""

    components: tuple[float, ...]
    index: int

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(float(c) for c in self.components))
        if any(c < 0.0 for c in self.components):
            raise DomainError(f"weight vector has a negative component: {self.components}")
        if abs(sum(self.components) - 1.0) > 1e-12:
            raise DomainError(f"weight vector components must sum to 1: {self.components}")

    def __len__(self) -> int:
        return len(self.components)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.components, dtype=np.float64)


def simplex_size(k: int, q: int) -> int:
    """Number of lattice points: C(K+q-1, K-1)."""
    return comb(k + q - 1, k - 1)


def _compositions(total: int, parts: int):
    """Yield all nonnegative integer tuples of the given length summing to
    total, in lexicographic order."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


def generate_simplex(k: int, q: int) -> list[WeightVector]:
    """All lattice weight vectors for K objectives at granularity q.

    Returns exactly C(K+q-1, K-1) vectors ordered lexicographically by their
    integer numerators, each summing to 1 with components that are multiples
    of 1/q.
    """
    if k < 2:
        raise DomainError(f"need at least 2 objectives, got K={k}")
    if q < 1:
        raise DomainError(f"granularity must be >= 1, got q={q}")
    vectors = []
    for n, numerators in enumerate(_compositions(q, k), start=1):
        vectors.append(WeightVector(tuple(i / q for i in numerators), index=n))
    assert len(vectors) == simplex_size(k, q)
    return vectors


def uniform_weights(k: int) -> WeightVector:
    """The barycenter (1/K, ..., 1/K), used by single-solution baselines."""
    if k < 1:
        raise DomainError(f"need at least 1 objective, got K={k}")
    return WeightVector(tuple(1.0 / k for _ in range(k)), index=1)
