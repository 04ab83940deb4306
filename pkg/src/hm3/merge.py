"""Parameter-space merging: averaging, soups, task arithmetic, drop/rescale
sparsification, sign-consistent (trim / elect / disjoint-merge) combination,
and the combined preference-weighted merge used by the full pipeline.

All operations are pure. Randomness is counter-based and keyed per
(seed, tensor name, coordinate), so results do not depend on iteration order
or on how work is split across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ProvenanceError
from .seeding import derive_seed, name_key, philox_rng
from .simplex import WeightVector
from .tensor_store import (
    Checkpoint,
    DeltaSet,
    apply_delta,
    check_same_structure,
    compute_delta,
    flatten_tensors,
    unflatten_tensors,
)

__all__ = [
    "MergeConfig",
    "SignVector",
    "average_merge",
    "soup_merge",
    "task_arithmetic_merge",
    "dare_drop_rescale",
    "scale_delta",
    "ties_trim",
    "ties_elect",
    "ties_disjoint_merge",
    "ties_merge",
    "dare_ties_merge",
    "hm3_param_merge",
    "merge_from_config",
]

METHODS = ("average", "soup", "task_arithmetic", "ties", "dare_ties", "hm3_param")
TRIM_SCOPES = ("global", "per_tensor")
LAMBDA_STAGES = ("pre_election", "post_election")


@dataclass(frozen=True)
class MergeConfig:
    """Knobs for one parameter-space merge.

    drop_prob is the coordinate drop probability of the drop/rescale step;
    keep_fraction is the surviving share of the magnitude trim; lambda_scalar
    multiplies the combined delta in the classic sign-consistent merge.
    trim_scope and lambda_stage exist for ablation and default to the
    pipeline's canonical behavior (global trim, weights applied before sign
    election).
    """

    method: str = "hm3_param"
    drop_prob: float = 0.5
    keep_fraction: float = 0.2
    weight_vector: WeightVector | None = None
    rng_seed: int = 0
    lambda_scalar: float = 1.0
    trim_scope: str = "global"
    lambda_stage: str = "pre_election"

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if not (0.0 <= self.drop_prob < 1.0):
            raise DomainError(f"drop_prob must be in [0, 1), got {self.drop_prob}")
        if not (0.0 < self.keep_fraction <= 1.0):
            raise DomainError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.trim_scope not in TRIM_SCOPES:
            raise DomainError(f"trim_scope must be one of {TRIM_SCOPES}")
        if self.lambda_stage not in LAMBDA_STAGES:
            raise DomainError(f"lambda_stage must be one of {LAMBDA_STAGES}")
        if self.method in ("soup", "task_arithmetic", "hm3_param") and self.weight_vector is None:
            raise DomainError(f"method {self.method!r} requires a weight_vector")


@dataclass(frozen=True)
class SignVector:
    """Elected sign (+1 or -1) for every coordinate of a merged tensor set."""

    signs: dict[str, np.ndarray]

    def __post_init__(self):
        frozen = {}
        for name in sorted(self.signs):
            arr = np.asarray(self.signs[name], dtype=np.int8)
            if not np.isin(arr, (-1, 1)).all():
                raise DomainError(f"sign tensor '{name}' has entries outside {{-1, +1}}")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "signs", frozen)


def _check_models_compatible(models: list[Checkpoint]) -> None:
    if len(models) < 2:
        raise DomainError(f"need at least 2 models to merge, got {len(models)}")
    for other in models[1:]:
        check_same_structure(models[0].tensors, other.tensors,
                             models[0].arch.model_id, other.arch.model_id)


def soup_merge(models: list[Checkpoint], lam: WeightVector) -> Checkpoint:
    """Elementwise weighted combination sum_k lambda_k * theta_k."""
    _check_models_compatible(models)
    if len(models) != len(lam):
        raise DomainError(
            f"{len(models)} models but weight vector of length {len(lam)}"
        )
    out: dict[str, np.ndarray] = {}
    for name in sorted(models[0].tensors):
        acc = np.zeros(models[0].tensors[name].shape, dtype=np.float64)
        for w, model in zip(lam.components, models):
            acc += w * model.tensors[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    model_id = "soup(" + ",".join(m.arch.model_id for m in models) + ")"
    return models[0].with_tensors(out, model_id=model_id, meta={})


def average_merge(models: list[Checkpoint]) -> Checkpoint:
    """Elementwise arithmetic mean; the uniform-weight special case of a soup."""
    _check_models_compatible(models)
    k = len(models)
    uniform = WeightVector(tuple(1.0 / k for _ in range(k)), index=1)
    merged = soup_merge(models, uniform)
    model_id = "average(" + ",".join(m.arch.model_id for m in models) + ")"
    return merged.with_tensors(merged.tensors, model_id=model_id)


def _check_delta_provenance(base: Checkpoint, deltas: list[DeltaSet]) -> None:
    for d in deltas:
        if d.base_id != base.arch.model_id:
            raise ProvenanceError(
                f"delta for task {d.task_id} was taken against base '{d.base_id}', "
                f"not '{base.arch.model_id}'"
            )
        check_same_structure(base.tensors, d.tensors, "base", f"delta[task {d.task_id}]")


def task_arithmetic_merge(base: Checkpoint, deltas: list[DeltaSet],
                          lam: WeightVector) -> Checkpoint:
    """theta_base + sum_k lambda_k * delta_k."""
    if len(deltas) != len(lam):
        raise DomainError(f"{len(deltas)} deltas but weight vector of length {len(lam)}")
    _check_delta_provenance(base, deltas)
    out: dict[str, np.ndarray] = {}
    for name in sorted(base.tensors):
        acc = base.tensors[name].astype(np.float64)
        for w, d in zip(lam.components, deltas):
            acc = acc + w * d.tensors[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    return base.with_tensors(out, model_id=f"task_arithmetic({base.arch.model_id})", meta={})


# --- drop and rescale -------------------------------------------------------


def _keep_mask(seed: int, tensor_name: str, n: int, p: float) -> np.ndarray:
    """Bernoulli(1-p) keep mask; a pure function of (seed, name, index)."""
    u = philox_rng(seed, name_key(tensor_name)).random(n)
    return u >= p


def dare_drop_rescale(delta: DeltaSet, p: float, seed: int) -> DeltaSet:
    """Randomly zero each coordinate with probability p and divide survivors
    by (1 - p), preserving the delta in expectation."""
    if not (0.0 <= p < 1.0):
        raise DomainError(f"drop probability must be in [0, 1), got {p}")
    if delta.transform_tag != "raw":
        raise DomainError(
            f"drop/rescale expects a raw delta, got tag {delta.transform_tag!r}"
        )
    scale = np.float32(1.0 - p)
    out: dict[str, np.ndarray] = {}
    for name in sorted(delta.tensors):
        values = delta.tensors[name]
        keep = _keep_mask(seed, name, values.size, p).reshape(values.shape)
        out[name] = np.where(keep, values / scale, np.float32(0.0))
    return delta.with_tensors(out, transform_tag="dare_rescaled")


def scale_delta(delta: DeltaSet, scale: float) -> DeltaSet:
    """Multiply every coordinate by a scalar, keeping the transform tag."""
    s = np.float32(scale)
    return delta.with_tensors({n: s * v for n, v in delta.tensors.items()})


# --- sign-consistent merging -------------------------------------------------


def _trim_count(keep_fraction: float, total: int) -> int:
    # small slack so exact multiples of 1/total do not round up through ceil
    return max(1, min(total, math.ceil(keep_fraction * total - 1e-9)))


def _trim_flat(flat: np.ndarray, keep_fraction: float) -> np.ndarray:
    keep = _trim_count(keep_fraction, flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:keep]] = True
    return np.where(mask, flat, np.float32(0.0))


def ties_trim(delta: DeltaSet, keep_fraction: float, scope: str = "global") -> DeltaSet:
    """Zero all but the ceil(keep_fraction * D) largest-magnitude coordinates.

    The trim pools every tensor of the delta into one ranking; ties at the
    threshold magnitude are broken toward the lower flat index (tensors in
    lexicographic name order). scope="per_tensor" ranks each tensor
    independently instead.
    """
    if not (0.0 < keep_fraction <= 1.0):
        raise DomainError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if scope not in TRIM_SCOPES:
        raise DomainError(f"scope must be one of {TRIM_SCOPES}, got {scope!r}")
    if scope == "global":
        flat, layout = flatten_tensors(delta.tensors)
        trimmed = _trim_flat(flat, keep_fraction)
        out = unflatten_tensors(trimmed, layout)
    else:
        out = {
            name: _trim_flat(values.reshape(-1), keep_fraction).reshape(values.shape)
            for name, values in delta.tensors.items()
        }
    return delta.with_tensors(out, transform_tag="trimmed")


def ties_elect(deltas: list[DeltaSet]) -> SignVector:
    """Per coordinate, pick the sign with the larger total magnitude.

    Equal positive and negative mass (including the all-zero case) resolves
    to +1 so the election is deterministic.
    """
    if not deltas:
        raise DomainError("need at least one delta to elect signs")
    for other in deltas[1:]:
        check_same_structure(deltas[0].tensors, other.tensors,
                             f"delta[task {deltas[0].task_id}]",
                             f"delta[task {other.task_id}]")
    signs: dict[str, np.ndarray] = {}
    for name in sorted(deltas[0].tensors):
        pos = np.zeros(deltas[0].tensors[name].shape, dtype=np.float64)
        neg = np.zeros_like(pos)
        for d in deltas:
            v = d.tensors[name].astype(np.float64)
            pos += np.maximum(v, 0.0)
            neg += np.maximum(-v, 0.0)
        signs[name] = np.where(pos >= neg, 1, -1).astype(np.int8)
    return SignVector(signs)


def ties_disjoint_merge(deltas: list[DeltaSet], signs: SignVector,
                        weights: list[float] | None = None) -> DeltaSet:
    """Average, per coordinate, the entries whose sign matches the election.

    Zero entries never match either sign; coordinates with no matching entry
    merge to 0. Optional weights multiply each delta's values before the
    average (used by the post-election weighting ablation).
    """
    if not deltas:
        raise DomainError("need at least one delta to merge")
    check_same_structure(deltas[0].tensors, dict(signs.signs), "deltas", "signs")
    for other in deltas[1:]:
        check_same_structure(deltas[0].tensors, other.tensors, "first delta", "delta")
    if weights is not None and len(weights) != len(deltas):
        raise DomainError(f"{len(weights)} weights for {len(deltas)} deltas")
    out: dict[str, np.ndarray] = {}
    for name in sorted(deltas[0].tensors):
        elected = signs.signs[name].astype(np.float64)
        acc = np.zeros(deltas[0].tensors[name].shape, dtype=np.float64)
        count = np.zeros(acc.shape, dtype=np.int64)
        for k, d in enumerate(deltas):
            v = d.tensors[name].astype(np.float64)
            matches = np.sign(v) == elected
            w = 1.0 if weights is None else float(weights[k])
            acc += np.where(matches, w * v, 0.0)
            count += matches
        merged = np.where(count > 0, acc / np.maximum(count, 1), 0.0)
        out[name] = merged.astype(np.float32)
    return deltas[0].with_tensors(out, transform_tag="trimmed")


def ties_merge(base: Checkpoint, deltas: list[DeltaSet], cfg: MergeConfig) -> Checkpoint:
    """Classic trim / elect / disjoint-merge combination:
    theta_base + lambda_scalar * delta_combined."""
    _check_delta_provenance(base, deltas)
    trimmed = [ties_trim(d, cfg.keep_fraction, cfg.trim_scope) for d in deltas]
    combined = ties_disjoint_merge(trimmed, ties_elect(trimmed))
    return apply_delta(base, combined, cfg.lambda_scalar,
                       model_id=f"ties({base.arch.model_id})")


def dare_ties_merge(base: Checkpoint, deltas: list[DeltaSet], cfg: MergeConfig) -> Checkpoint:
    """Drop/rescale each delta, then the classic sign-consistent merge."""
    _check_delta_provenance(base, deltas)
    rescaled = [
        dare_drop_rescale(d, cfg.drop_prob, derive_seed(cfg.rng_seed, f"dare.{d.task_id}"))
        for d in deltas
    ]
    trimmed = [ties_trim(d, cfg.keep_fraction, cfg.trim_scope) for d in rescaled]
    combined = ties_disjoint_merge(trimmed, ties_elect(trimmed))
    return apply_delta(base, combined, cfg.lambda_scalar,
                       model_id=f"dare_ties({base.arch.model_id})")


def hm3_param_merge(base: Checkpoint, deltas: list[DeltaSet], lam: WeightVector,
                    cfg: MergeConfig) -> Checkpoint:
    """Preference-weighted merge for one weight vector.

    Each task's delta is drop/rescaled, scaled by its preference weight, and
    magnitude-trimmed; the per-coordinate sign election and disjoint average
    then combine the surviving entries, and the result is added to the base.
    With lambda_stage="post_election" the preference weights skip the ranking
    and election and only weight the final average.
    """
    if len(deltas) != len(lam):
        raise DomainError(f"{len(deltas)} deltas but weight vector of length {len(lam)}")
    _check_delta_provenance(base, deltas)
    for d in deltas:
        if d.transform_tag != "raw":
            raise DomainError(
                f"expected raw deltas, got tag {d.transform_tag!r} for task {d.task_id}"
            )
    rescaled = [
        dare_drop_rescale(d, cfg.drop_prob, derive_seed(cfg.rng_seed, f"dare.{d.task_id}"))
        for d in deltas
    ]
    if cfg.lambda_stage == "pre_election":
        staged = [scale_delta(d, w) for d, w in zip(rescaled, lam.components)]
        trimmed = [ties_trim(d, cfg.keep_fraction, cfg.trim_scope) for d in staged]
        combined = ties_disjoint_merge(trimmed, ties_elect(trimmed))
    else:
        trimmed = [ties_trim(d, cfg.keep_fraction, cfg.trim_scope) for d in rescaled]
        combined = ties_disjoint_merge(trimmed, ties_elect(trimmed),
                                       weights=list(lam.components))
    return apply_delta(base, combined, 1.0,
                       model_id=f"hm3_param({base.arch.model_id},n={lam.index})")


def merge_from_config(base: Checkpoint, finetuned: list[Checkpoint],
                      cfg: MergeConfig) -> Checkpoint:
    """Dispatch a merge method over a base model and its fine-tuned variants."""
    if cfg.method == "average":
        return average_merge(finetuned)
    if cfg.method == "soup":
        return soup_merge(finetuned, cfg.weight_vector)
    deltas = [
        _delta_for(base, model, task_id=k) for k, model in enumerate(finetuned, start=1)
    ]
    if cfg.method == "task_arithmetic":
        return task_arithmetic_merge(base, deltas, cfg.weight_vector)
    if cfg.method == "ties":
        return ties_merge(base, deltas, cfg)
    if cfg.method == "dare_ties":
        return dare_ties_merge(base, deltas, cfg)
    return hm3_param_merge(base, deltas, cfg.weight_vector, cfg)


def _delta_for(base: Checkpoint, model: Checkpoint, task_id: int) -> DeltaSet:
    declared = int(model.meta.get("task_id", task_id))
    return compute_delta(model, base, task_id=declared)
