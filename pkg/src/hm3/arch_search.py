"""Layer-path search space: the decision process over (model, layer) hops.

A token starts at the anchor model's input projection and hops through hidden
layers drawn from any model in the zoo, each hop modulated by an elementwise
input scale. Episodes end on an explicit stop action or at the hop cap. The
reward combines the preference-scalarized probe accuracy of the partial model
with a penalty linear in the path length.

States carry the probe batch's hidden activations, so stepping is one matrix
product instead of replaying the whole prefix; rewards are identical to
assembling the prefix and evaluating it on the same probe subset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AssemblyError,
    ConfigError,
    DomainError,
    ProtocolError,
)
from .simplex import WeightVector
from .tensor_store import Checkpoint
from .zoo import (
    MetricVector,
    TaskSpec,
    _head_logits,
    hop_forward,
    load_split,
    probe_indices,
)

__all__ = [
    "LayerRef",
    "PathState",
    "PathAction",
    "InferencePath",
    "EnvConfig",
    "PathEnv",
    "env_reset",
    "env_step",
    "assemble_model",
    "PathModel",
    "scalarize",
    "identity_path",
    "path_to_record",
    "path_from_record",
]

REWARD_MODES = ("per_step", "terminal")


@dataclass(frozen=True)
class LayerRef:
    """1-based (model, layer) coordinates into the zoo."""

    model_index: int
    layer_index: int

    def __post_init__(self):
        if self.model_index < 1 or self.layer_index < 1:
            raise DomainError(
                f"layer reference indices are 1-based, got {(self.model_index, self.layer_index)}"
            )


@dataclass(frozen=True)
class PathAction:
    """Either hop to a layer or stop the episode."""

    target: LayerRef | None = None

    @classmethod
    def hop(cls, model_index: int, layer_index: int) -> "PathAction":
        return cls(target=LayerRef(model_index, layer_index))

    @classmethod
    def stop(cls) -> "PathAction":
        return cls(target=None)

    @property
    def is_stop(self) -> bool:
        return self.target is None


@dataclass(frozen=True)
class PathState:
    """Position of the token: START (current=None) or the last hopped layer.

    hidden is the probe batch's activations after the partial path; it is a
    pure function of partial_path and exists only to make stepping cheap.
    """

    current: LayerRef | None
    t: int
    partial_path: tuple[LayerRef, ...]
    done: bool = False
    hidden: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.t != len(self.partial_path):
            raise DomainError(
                f"step counter {self.t} disagrees with path length {len(self.partial_path)}"
            )


@dataclass(frozen=True)
class InferencePath:
    """An ordered sequence of layer hops with per-hop input scales."""

    hops: tuple[LayerRef, ...]
    scales: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.hops) < 1:
            raise DomainError("an inference path needs at least one hop")
        if len(self.scales) != len(self.hops):
            raise DomainError(
                f"{len(self.scales)} scale vectors for {len(self.hops)} hops"
            )
        frozen = []
        for s in self.scales:
            arr = np.asarray(s, dtype=np.float32).reshape(-1)
            arr.flags.writeable = False
            frozen.append(arr)
        object.__setattr__(self, "scales", tuple(frozen))

    @property
    def length(self) -> int:
        return len(self.hops)


@dataclass(frozen=True)
class EnvConfig:
    """Environment knobs for one weight vector's search."""

    lam: WeightVector
    tasks: tuple[TaskSpec, ...]
    beta1: float = 0.01
    t_max: int = 8
    reward_mode: str = "per_step"
    probe_batch: int = 64
    eval_seed: int = 0
    num_models: int | None = None  # defaults to K fine-tuned models plus the merged one

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.beta1 < 0:
            raise DomainError(f"path penalty coefficient must be >= 0, got {self.beta1}")
        if self.t_max < 1:
            raise DomainError(f"t_max must be >= 1, got {self.t_max}")
        if self.reward_mode not in REWARD_MODES:
            raise DomainError(f"reward_mode must be one of {REWARD_MODES}")
        if self.probe_batch < 1:
            raise DomainError(f"probe_batch must be >= 1, got {self.probe_batch}")
        if len(self.tasks) != len(self.lam):
            raise DomainError(
                f"{len(self.tasks)} tasks but weight vector of length {len(self.lam)}"
            )

    @property
    def expected_models(self) -> int:
        return self.num_models if self.num_models is not None else len(self.lam) + 1


def scalarize(metrics, lam: WeightVector) -> float:
    """Preference-weighted sum of a metric vector."""
    values = metrics.as_array() if isinstance(metrics, MetricVector) else np.asarray(metrics, dtype=np.float64)
    if values.shape != (len(lam),):
        raise DomainError(
            f"metric vector of shape {values.shape} does not match weight vector of length {len(lam)}"
        )
    return float(values @ lam.as_array())


class PathEnv:
    """Single-owner episode environment over a fixed zoo of checkpoints.

    The last checkpoint is the anchor: its input projection feeds the first
    hop and its heads score every partial path.
    """

    def __init__(self, cfg: EnvConfig, models: list[Checkpoint]):
        if len(models) != cfg.expected_models:
            raise ConfigError(
                f"environment expects {cfg.expected_models} models "
                f"(K fine-tuned plus the merged one), got {len(models)}"
            )
        arch0 = models[0].arch
        for m in models[1:]:
            a = m.arch
            if (a.num_layers, a.hidden_width, a.input_dim, a.head_dims, a.activation) != (
                arch0.num_layers, arch0.hidden_width, arch0.input_dim,
                arch0.head_dims, arch0.activation,
            ):
                raise ConfigError(
                    f"zoo models disagree on architecture: '{arch0.model_id}' vs '{a.model_id}'"
                )
        self.cfg = cfg
        self.models = list(models)
        self.anchor = models[-1]
        self.num_models = len(models)
        self.num_layers = arch0.num_layers
        self.hidden_width = arch0.hidden_width
        self.activation = arch0.activation
        self.t_max = cfg.t_max

        xs, ys, slices = [], [], []
        row = 0
        for k, task in enumerate(cfg.tasks):
            x, y = load_split(task, "val")
            if cfg.probe_batch < x.shape[0]:
                idx = probe_indices(cfg.eval_seed, task.task_id, x.shape[0], cfg.probe_batch)
                x, y = x[idx], y[idx]
            xs.append(x)
            ys.append(y)
            slices.append(slice(row, row + x.shape[0]))
            row += x.shape[0]
        self._probe_x = np.concatenate(xs, axis=0)
        self._probe_y = ys
        self._probe_slices = slices
        self._h0 = (
            self._probe_x @ self.anchor.tensors["input.weight"].T
            + self.anchor.tensors["input.bias"]
        )
        self._lam = cfg.lam.as_array()

    def reset(self) -> PathState:
        return PathState(current=None, t=0, partial_path=(), hidden=self._h0)

    def _layer(self, ref: LayerRef) -> tuple[np.ndarray, np.ndarray]:
        if not (1 <= ref.model_index <= self.num_models):
            raise AssemblyError(
                f"model index {ref.model_index} outside [1, {self.num_models}]"
            )
        if not (1 <= ref.layer_index <= self.num_layers):
            raise AssemblyError(
                f"layer index {ref.layer_index} outside [1, {self.num_layers}]"
            )
        tensors = self.models[ref.model_index - 1].tensors
        return tensors[f"layer{ref.layer_index}.weight"], tensors[f"layer{ref.layer_index}.bias"]

    def _hidden(self, state: PathState) -> np.ndarray:
        if state.hidden is not None:
            return state.hidden
        h = self._h0
        for ref in state.partial_path:  # replay for externally built states
            w, b = self._layer(ref)
            h = hop_forward(h, w, b, self.activation)
        return h

    def probe_metrics(self, hidden: np.ndarray) -> np.ndarray:
        """Per-task probe accuracy of the partial model with these activations."""
        accs = np.empty(len(self.cfg.tasks))
        for k, (sl, y) in enumerate(zip(self._probe_slices, self._probe_y)):
            w = self.anchor.tensors[f"head_{k + 1}.weight"]
            b = self.anchor.tensors[f"head_{k + 1}.bias"]
            logit = (hidden[sl] @ w.T + b)[:, 0]
            accs[k] = np.mean(np.where(logit > 0.0, 1, -1) == y)
        return accs

    def step(self, state: PathState, action: PathAction,
             scale: np.ndarray | None = None) -> tuple[PathState, float, bool]:
        """Apply one action; returns (new state, reward, done)."""
        if state.done:
            raise ProtocolError("episode already finished; reset the environment")
        cfg = self.cfg
        if action.is_stop:
            if state.t == 0:
                raise ProtocolError("cannot stop before the first hop")
            hidden = self._hidden(state)
            metric = scalarize(self.probe_metrics(hidden), cfg.lam)
            reward = metric - cfg.beta1 * state.t
            new_state = PathState(current=state.current, t=state.t,
                                  partial_path=state.partial_path, done=True,
                                  hidden=hidden)
            return new_state, float(reward), True

        if state.t >= cfg.t_max:
            raise ProtocolError(f"path already at the hop cap {cfg.t_max}")
        ref = action.target
        w, b = self._layer(ref)
        if scale is None:
            scale_arr = None
        else:
            scale_arr = np.asarray(scale, dtype=np.float32).reshape(-1)
            if scale_arr.shape[0] != self.hidden_width:
                raise DomainError(
                    f"scale vector has {scale_arr.shape[0]} entries, expected {self.hidden_width}"
                )
        hidden = hop_forward(self._hidden(state), w, b, self.activation, scale_arr)
        t_new = state.t + 1
        done = t_new >= cfg.t_max  # forced stop at the cap
        if cfg.reward_mode == "per_step" or done:
            metric = scalarize(self.probe_metrics(hidden), cfg.lam)
        else:
            metric = 0.0
        reward = metric - cfg.beta1 * t_new
        new_state = PathState(current=ref, t=t_new,
                              partial_path=state.partial_path + (ref,),
                              done=done, hidden=hidden)
        return new_state, float(reward), done


def env_reset(cfg: EnvConfig, zoo: list[Checkpoint]) -> PathState:
    """Start state over a zoo of K fine-tuned checkpoints plus the merged one."""
    return PathEnv(cfg, list(zoo)).reset()


def env_step(state: PathState, action: PathAction, scale,
             cfg: EnvConfig, zoo: list[Checkpoint]) -> tuple[PathState, float, bool]:
    """One transition as a pure function of (state, action, scale, cfg, zoo).

    Convenience form of PathEnv.step; training loops keep a PathEnv instance
    instead of rebuilding the probe cache every call.
    """
    return PathEnv(cfg, list(zoo)).step(state, action, scale)


class PathModel:
    """Executable model assembled from an inference path over the zoo."""

    def __init__(self, path: InferencePath, zoo: list[Checkpoint]):
        anchor = zoo[-1]
        self.arch = anchor.arch
        self._anchor = anchor
        self._activation = anchor.arch.activation
        num_layers = anchor.arch.num_layers
        self._hops = []
        for ref, scale in zip(path.hops, path.scales):
            if not (1 <= ref.model_index <= len(zoo)):
                raise AssemblyError(f"model index {ref.model_index} outside [1, {len(zoo)}]")
            if not (1 <= ref.layer_index <= num_layers):
                raise AssemblyError(f"layer index {ref.layer_index} outside [1, {num_layers}]")
            if scale.shape[0] != anchor.arch.hidden_width:
                raise AssemblyError(
                    f"scale vector has {scale.shape[0]} entries, "
                    f"expected {anchor.arch.hidden_width}"
                )
            tensors = zoo[ref.model_index - 1].tensors
            self._hops.append((
                tensors[f"layer{ref.layer_index}.weight"],
                tensors[f"layer{ref.layer_index}.bias"],
                scale,
            ))
        self.path = path

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        h = (np.asarray(x, dtype=np.float32) @ self._anchor.tensors["input.weight"].T
             + self._anchor.tensors["input.bias"])
        for w, b, scale in self._hops:
            h = hop_forward(h, w, b, self._activation, scale)
        return _head_logits(self._anchor.tensors, self.arch, h)


def assemble_model(path: InferencePath, zoo: list[Checkpoint]) -> PathModel:
    """Bind a path's layer references to the zoo's tensors."""
    return PathModel(path, zoo)


def identity_path(model_index: int, num_layers: int, hidden_width: int) -> InferencePath:
    """The path replaying one model's own layers in order with unit scales."""
    ones = np.ones(hidden_width, dtype=np.float32)
    return InferencePath(
        hops=tuple(LayerRef(model_index, l) for l in range(1, num_layers + 1)),
        scales=tuple(ones for _ in range(num_layers)),
    )


def path_to_record(path: InferencePath, lam: WeightVector, ret: float) -> dict:
    """JSON-serializable record of a searched path."""
    return {
        "hops": [[ref.model_index, ref.layer_index] for ref in path.hops],
        "scales": [[float(v) for v in s] for s in path.scales],
        "lambda": [float(c) for c in lam.components],
        "return": float(ret),
    }


def path_from_record(record: dict) -> InferencePath:
    hops = tuple(LayerRef(int(m), int(l)) for m, l in record["hops"])
    scales = tuple(np.asarray(s, dtype=np.float32) for s in record["scales"])
    return InferencePath(hops=hops, scales=scales)


def write_path_json(path_obj, record: dict) -> None:
    with open(path_obj, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
