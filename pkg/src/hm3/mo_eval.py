"""Pareto dominance, non-dominated filtering, and the hypervolume indicator.

The canonical internal orientation is minimization with reference point
(1, ..., 1): accuracy-style metrics in [0, 1] are first mapped through
normalize_to_min. Exact hypervolume covers 2 and 3 objectives (a sweep and a
sweep-over-slices respectively); higher dimensions fall back to Monte Carlo
with a reported standard error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = [
    "ObjectivePoint",
    "ParetoFront",
    "dominates",
    "nondominated_filter",
    "normalize_to_min",
    "hypervolume",
    "hypervolume_monte_carlo",
]

ORIENTATIONS = ("maximize", "minimize")
EXACT_HV_MAX_DIM = 3


@dataclass(frozen=True)
class ObjectivePoint:
    """One point in objective space with its optimization orientation."""

    values: tuple[float, ...]
    orientation: str = "minimize"
    label: str = ""
    clipped: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.orientation not in ORIENTATIONS:
            raise DomainError(f"orientation must be one of {ORIENTATIONS}")
        if not all(np.isfinite(v) for v in self.values):
            raise DomainError(f"objective values must be finite, got {self.values}")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ParetoFront:
    """A mutually non-dominated point set plus the hypervolume reference."""

    points: tuple[ObjectivePoint, ...]
    reference: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if self.reference is not None:
            object.__setattr__(self, "reference", tuple(float(r) for r in self.reference))

    def __len__(self) -> int:
        return len(self.points)


def _check_comparable(a: ObjectivePoint, b: ObjectivePoint) -> None:
    if len(a) != len(b):
        raise DomainError(f"dimension mismatch: {len(a)} vs {len(b)}")
    if a.orientation != b.orientation:
        raise DomainError(
            f"orientation mismatch: {a.orientation!r} vs {b.orientation!r}"
        )


def dominates(a: ObjectivePoint, b: ObjectivePoint) -> bool:
    """True iff a is no worse than b everywhere and strictly better somewhere."""
    _check_comparable(a, b)
    av = np.asarray(a.values)
    bv = np.asarray(b.values)
    if a.orientation == "maximize":
        av, bv = -av, -bv
    return bool(np.all(av <= bv) and np.any(av < bv))


def nondominated_filter(points: list[ObjectivePoint]) -> ParetoFront:
    """Keep exactly the points no other point dominates.

    Duplicate coordinate vectors collapse to their first occurrence. An empty
    input yields an empty front.
    """
    if not points:
        return ParetoFront(points=())
    orientation = points[0].orientation
    dim = len(points[0])
    for p in points[1:]:
        if p.orientation != orientation or len(p) != dim:
            raise DomainError("all points must share dimension and orientation")

    unique: list[ObjectivePoint] = []
    seen: set[tuple[float, ...]] = set()
    for p in points:
        if p.values not in seen:
            seen.add(p.values)
            unique.append(p)

    vals = np.asarray([p.values for p in unique], dtype=np.float64)
    if orientation == "maximize":
        vals = -vals
    keep = []
    for i in range(len(unique)):
        others = np.delete(np.arange(len(unique)), i)
        dominated = np.any(
            np.all(vals[others] <= vals[i], axis=1) & np.any(vals[others] < vals[i], axis=1)
        )
        if not dominated:
            keep.append(unique[i])
    return ParetoFront(points=tuple(keep))


def normalize_to_min(points: list[ObjectivePoint],
                     bounds: list[tuple[float, float]]) -> list[ObjectivePoint]:
    """Affinely map every coordinate into [0, 1] under minimization.

    Maximize-oriented values map through (hi - v) / (hi - lo) so that better
    is smaller; minimize-oriented values map through (v - lo) / (hi - lo).
    Values outside the bounds clip to [0, 1] and flag the point.
    """
    out = []
    for lo, hi in bounds:
        if not hi > lo:
            raise DomainError(f"bounds need hi > lo, got ({lo}, {hi})")
    for p in points:
        if len(p) != len(bounds):
            raise DomainError(f"point has {len(p)} coordinates, bounds have {len(bounds)}")
        mapped = []
        was_clipped = p.clipped
        for v, (lo, hi) in zip(p.values, bounds):
            if p.orientation == "maximize":
                m = (hi - v) / (hi - lo)
            else:
                m = (v - lo) / (hi - lo)
            if m < 0.0 or m > 1.0:
                was_clipped = True
                m = min(1.0, max(0.0, m))
            mapped.append(m)
        out.append(ObjectivePoint(values=tuple(mapped), orientation="minimize",
                                  label=p.label, clipped=was_clipped))
    return out


def _relevant_points(front: ParetoFront) -> tuple[np.ndarray, np.ndarray]:
    if front.points and any(p.orientation != "minimize" for p in front.points):
        raise DomainError("hypervolume requires minimization orientation; "
                          "normalize_to_min first")
    dim = len(front.points[0]) if front.points else (
        len(front.reference) if front.reference else 0
    )
    ref = np.ones(dim) if front.reference is None else np.asarray(front.reference, dtype=np.float64)
    if front.points and len(ref) != len(front.points[0]):
        raise DomainError(
            f"reference has {len(ref)} coordinates, points have {len(front.points[0])}"
        )
    if not front.points:
        return np.zeros((0, dim)), ref
    vals = np.asarray([p.values for p in front.points], dtype=np.float64)
    # points at or beyond the reference in any coordinate bound an empty box
    inside = np.all(vals < ref, axis=1)
    vals = np.unique(vals[inside], axis=0) if inside.any() else np.zeros((0, dim))
    return vals, ref


def _hv2(vals: np.ndarray, ref: np.ndarray) -> float:
    """Exact 2-D dominated volume by a sweep over points sorted on the first axis."""
    if vals.shape[0] == 0:
        return 0.0
    order = np.lexsort((vals[:, 1], vals[:, 0]))
    vals = vals[order]
    # reduce to the staircase: y strictly decreasing as x increases
    xs: list[float] = []
    ys: list[float] = []
    best_y = np.inf
    for x, y in vals:
        if y < best_y:
            xs.append(float(x))
            ys.append(float(y))
            best_y = y
    hv = 0.0
    for i in range(len(xs)):
        next_x = xs[i + 1] if i + 1 < len(xs) else float(ref[0])
        hv += (next_x - xs[i]) * (float(ref[1]) - ys[i])
    return hv


def _hv3(vals: np.ndarray, ref: np.ndarray) -> float:
    """Exact 3-D dominated volume: sweep ascending z, integrating 2-D slices."""
    if vals.shape[0] == 0:
        return 0.0
    zs = np.unique(vals[:, 2])
    hv = 0.0
    for i, z in enumerate(zs):
        z_next = zs[i + 1] if i + 1 < len(zs) else ref[2]
        active = vals[vals[:, 2] <= z][:, :2]
        hv += _hv2(active, ref[:2]) * (z_next - z)
    return hv


def hypervolume(front: ParetoFront) -> float:
    """Lebesgue measure of the region between the front and its reference.

    Exact for 2 or 3 objectives; beyond that this delegates to the Monte
    Carlo estimator with its default sample count.
    """
    vals, ref = _relevant_points(front)
    dim = ref.shape[0]
    if vals.shape[0] == 0:
        return 0.0
    if dim == 1:
        return float(ref[0] - vals.min())
    if dim == 2:
        return _hv2(vals, ref)
    if dim == 3:
        return _hv3(vals, ref)
    hv, _se = hypervolume_monte_carlo(front)
    return hv


def hypervolume_monte_carlo(front: ParetoFront, samples: int = 1_000_000,
                            seed: int = 0) -> tuple[float, float]:
    """Monte Carlo estimate of the dominated volume and its standard error.

    Samples uniformly over the box spanned by the coordinate-wise minimum of
    the front and the reference point.
    """
    if samples < 1:
        raise DomainError(f"need at least one sample, got {samples}")
    vals, ref = _relevant_points(front)
    if vals.shape[0] == 0:
        return 0.0, 0.0
    lo = vals.min(axis=0)
    box = float(np.prod(ref - lo))
    if box == 0.0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    remaining = samples
    chunk = 262_144
    while remaining > 0:
        n = min(chunk, remaining)
        q = lo + (ref - lo) * rng.random((n, ref.shape[0]))
        covered = np.zeros(n, dtype=bool)
        for p in vals:
            covered |= np.all(q >= p, axis=1)
        hits += int(covered.sum())
        remaining -= n
    frac = hits / samples
    estimate = box * frac
    se = box * float(np.sqrt(max(frac * (1.0 - frac), 0.0) / samples))
    return estimate, se
