"""Synthetic model zoo: K binary classification tasks over a shared input
space, one multi-head base network, and K fine-tuned variants.

Tasks share R^8 inputs drawn from a standard normal. Task k labels a point by
the sign of w_k . x plus a task-specific nonlinearity (none, a centered
quadratic form, or a parity-of-thresholds term; further tasks cycle these
with fresh parameter draws). Metrics are accuracies in [0, 1], higher is
better, which is the orientation contract the multi-objective layers rely on.

The network is an input projection into a residual stream of uniform width
followed by one linear head per task, so any hidden layer of any sibling
model fits at any position of an inference path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import DomainError, EvaluationError, TrainingError
from .seeding import derive_seed, philox_rng
from .tensor_store import ArchDescriptor, Checkpoint

__all__ = [
    "TaskSpec",
    "MetricVector",
    "make_tasks",
    "load_split",
    "default_arch",
    "init_checkpoint",
    "train_base",
    "finetune_task",
    "evaluate",
    "ZooModel",
    "hop_forward",
    "forward_hidden",
    "probe_indices",
]

INPUT_DIM = 8
SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 1001, "val": 1002, "test": 1003}
# strong nonlinear terms keep the tasks distinct enough that one trunk cannot
# serve them all, which is the interference the pipeline exists to resolve
_NONLINEARITY_WEIGHT = 6.0
_PARITY_COORDS = 2


@dataclass(frozen=True)
class TaskSpec:
    """One synthetic binary classification task."""

    task_id: int
    generator_seed: int
    train_size: int = 2048
    val_size: int = 512
    metric_name: str = "accuracy"

    def __post_init__(self):
        if self.task_id < 1:
            raise DomainError(f"task_id must be >= 1, got {self.task_id}")
        if self.train_size < 1 or self.val_size < 1:
            raise DomainError("split sizes must be positive")


@dataclass(frozen=True)
class MetricVector:
    """Per-task accuracies for one model on one split."""

    values: tuple[float, ...]
    eval_seed: int = 0
    split: str = "val"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        for v in self.values:
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise DomainError(f"metric values must lie in [0, 1], got {self.values}")
        if self.split not in ("val", "test"):
            raise DomainError(f"split must be 'val' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def make_tasks(k: int, seed: int) -> list[TaskSpec]:
    """K deterministic tasks; the nonlinearity kind cycles with task id."""
    if not (2 <= k <= 6):
        raise DomainError(f"task count must be in [2, 6], got {k}")
    return [
        TaskSpec(task_id=i, generator_seed=derive_seed(seed, f"task{i}"))
        for i in range(1, k + 1)
    ]


def _task_kind(task_id: int) -> str:
    return ("linear", "quadratic", "parity")[(task_id - 1) % 3]


@lru_cache(maxsize=32)
def _task_params(generator_seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = philox_rng(generator_seed, 7)
    w = rng.normal(size=INPUT_DIM)
    w /= np.linalg.norm(w)
    q = rng.normal(size=(INPUT_DIM, INPUT_DIM))
    q = 0.5 * (q + q.T)
    q /= np.linalg.norm(q)
    parity_coords = np.sort(rng.choice(INPUT_DIM, size=_PARITY_COORDS, replace=False))
    return w, q, parity_coords


def _labels(task: TaskSpec, x: np.ndarray) -> np.ndarray:
    w, q, parity_coords = _task_params(task.generator_seed)
    x64 = x.astype(np.float64)
    score = x64 @ w
    kind = _task_kind(task.task_id)
    if kind == "quadratic":
        g = (np.einsum("bi,ij,bj->b", x64, q, x64) - np.trace(q)) / np.sqrt(2.0)
        score = score + _NONLINEARITY_WEIGHT * g
    elif kind == "parity":
        hits = (x64[:, parity_coords] > 0.0).sum(axis=1)
        g = np.where(hits % 2 == 0, 1.0, -1.0)
        score = score + _NONLINEARITY_WEIGHT * g
    return np.where(score > 0.0, 1, -1).astype(np.int8)


@lru_cache(maxsize=64)
def _cached_split(generator_seed: int, train_size: int, val_size: int,
                  split: str) -> tuple[np.ndarray, np.ndarray]:
    n = {"train": train_size, "val": val_size, "test": val_size}[split]
    rng = philox_rng(generator_seed, _SPLIT_CODE[split])
    x = rng.standard_normal((n, INPUT_DIM), dtype=np.float32)
    x.flags.writeable = False
    return x, None


def load_split(task: TaskSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and +/-1 labels for one split of one task. Deterministic."""
    if split not in SPLITS:
        raise DomainError(f"split must be one of {SPLITS}, got {split!r}")
    x, _ = _cached_split(task.generator_seed, task.train_size, task.val_size, split)
    y = _labels(task, x)
    y.flags.writeable = False
    return x, y


def probe_indices(seed: int, task_id: int, population: int, count: int) -> np.ndarray:
    """Deterministic without-replacement subsample used for cheap reward probes."""
    if count >= population:
        return np.arange(population)
    rng = philox_rng(seed, 5000 + task_id)
    return np.sort(rng.choice(population, size=count, replace=False))


# --- network ----------------------------------------------------------------


def default_arch(k: int, num_layers: int = 4, hidden_width: int = 32,
                 activation: str = "relu", model_id: str = "base") -> ArchDescriptor:
    return ArchDescriptor(
        num_layers=num_layers,
        hidden_width=hidden_width,
        input_dim=INPUT_DIM,
        activation=activation,
        head_dims=tuple(1 for _ in range(k)),
        model_id=model_id,
    )


def _act(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, np.float32(0.0))
    return np.tanh(pre)


def _act_grad(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (pre > 0).astype(np.float32)
    t = np.tanh(pre)
    return np.float32(1.0) - t * t


def hop_forward(h: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                activation: str, scale: np.ndarray | None = None) -> np.ndarray:
    """One residual layer: h + act(W (scale * h) + b).

    The optional scale multiplies the layer input elementwise; passing ones is
    bit-identical to passing None.
    """
    z = h if scale is None else h * scale
    return h + _act(z @ weight.T + bias, activation)


def forward_hidden(tensors: dict[str, np.ndarray], arch: ArchDescriptor,
                   x: np.ndarray) -> np.ndarray:
    h = x @ tensors["input.weight"].T + tensors["input.bias"]
    for i in range(1, arch.num_layers + 1):
        h = hop_forward(h, tensors[f"layer{i}.weight"], tensors[f"layer{i}.bias"],
                        arch.activation)
    return h


def _head_logits(tensors: dict[str, np.ndarray], arch: ArchDescriptor,
                 h: np.ndarray) -> np.ndarray:
    cols = []
    for k in range(1, arch.num_tasks + 1):
        cols.append(h @ tensors[f"head_{k}.weight"].T + tensors[f"head_{k}.bias"])
    return np.concatenate(cols, axis=1)


class ZooModel:
    """Executable wrapper over a checkpoint: R^8 batch in, K logits out."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        self.arch = ckpt.arch

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        h = forward_hidden(self.ckpt.tensors, self.arch, np.asarray(x, dtype=np.float32))
        return _head_logits(self.ckpt.tensors, self.arch, h)


def init_checkpoint(arch: ArchDescriptor, seed: int,
                    meta: dict[str, str] | None = None) -> Checkpoint:
    """Seeded random initialization (the steps=0 training result)."""
    rng = np.random.default_rng(derive_seed(seed, "init"))
    d = arch.hidden_width
    tensors: dict[str, np.ndarray] = {
        "input.weight": rng.normal(0.0, 1.0 / np.sqrt(arch.input_dim),
                                   size=(d, arch.input_dim)),
        "input.bias": np.zeros(d),
    }
    for i in range(1, arch.num_layers + 1):
        tensors[f"layer{i}.weight"] = rng.normal(0.0, 0.5 / np.sqrt(d), size=(d, d))
        tensors[f"layer{i}.bias"] = np.zeros(d)
    for k, dim in enumerate(arch.head_dims, start=1):
        # zero heads keep an untrained model at label-balance accuracy
        tensors[f"head_{k}.weight"] = np.zeros((dim, d))
        tensors[f"head_{k}.bias"] = np.zeros(dim)
    return Checkpoint(arch=arch, tensors=tensors, meta=dict(meta or {}))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _train(start: Checkpoint, tasks: list[TaskSpec], task_weights: np.ndarray,
           steps: int, seed: int, lr: float, batch_size: int) -> dict[str, np.ndarray]:
    """Mini-batch SGD over the task mixture. Returns new parameter tensors.

    Each step draws one task proportionally to its mixture weight and one
    batch from that task's train split. The task-switching noise is what
    keeps the base model a generalist instead of mastering the quickest task.
    """
    arch = start.arch
    params = {name: arr.copy() for name, arr in start.tensors.items()}
    rng = np.random.default_rng(derive_seed(seed, "batches"))
    data = [load_split(t, "train") for t in tasks]
    probs = np.asarray(task_weights, dtype=np.float64)
    if probs.sum() <= 0:
        raise DomainError("at least one task needs positive mixture weight")
    probs = probs / probs.sum()
    lr32 = np.float32(lr)

    for step in range(steps):
        k = int(rng.choice(len(tasks), p=probs))
        head = tasks[k].task_id
        x_k, y_k = data[k]
        idx = rng.integers(0, x_k.shape[0], size=batch_size)
        x = x_k[idx]
        y = y_k[idx].astype(np.float32)

        # forward, keeping per-layer preactivations for the backward pass
        hs = [x @ params["input.weight"].T + params["input.bias"]]
        pres = []
        for i in range(1, arch.num_layers + 1):
            pre = hs[-1] @ params[f"layer{i}.weight"].T + params[f"layer{i}.bias"]
            pres.append(pre)
            hs.append(hs[-1] + _act(pre, arch.activation))
        h_final = hs[-1]

        w_head = params[f"head_{head}.weight"]
        logit = (h_final @ w_head.T + params[f"head_{head}.bias"])[:, 0]
        margin = y * logit
        loss = float(np.mean(np.logaddexp(0.0, -margin)))
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        d_logit = (-y * _sigmoid(-margin) / batch_size).astype(np.float32)

        grads = {
            f"head_{head}.weight": d_logit @ h_final,
            f"head_{head}.bias": d_logit.sum(keepdims=True),
        }
        d_h = np.outer(d_logit, w_head[0])
        for i in range(arch.num_layers, 0, -1):
            d_pre = d_h * _act_grad(pres[i - 1], arch.activation)
            grads[f"layer{i}.weight"] = d_pre.T @ hs[i - 1]
            grads[f"layer{i}.bias"] = d_pre.sum(axis=0)
            d_h = d_h + d_pre @ params[f"layer{i}.weight"]
        grads["input.weight"] = d_h.T @ x
        grads["input.bias"] = d_h.sum(axis=0)

        for name, g in grads.items():
            params[name] = params[name] - lr32 * g

    return params


def train_base(arch: ArchDescriptor, tasks: list[TaskSpec], steps: int, seed: int,
               lr: float = 0.17, batch_size: int = 4) -> Checkpoint:
    """Train the shared base model on the uniform task mixture.

    The default small batches and large step size are deliberate: the base is
    meant to end up a noisy generalist with headroom on every task, which is
    the regime where merging specialists is worthwhile.
    """
    if arch.num_tasks != len(tasks):
        raise DomainError(
            f"architecture declares {arch.num_tasks} heads for {len(tasks)} tasks"
        )
    start = init_checkpoint(arch, seed)
    weights = np.full(len(tasks), 1.0 / len(tasks))
    params = _train(start, tasks, weights, steps, seed, lr, batch_size)
    meta = {"kind": "base", "seed": str(seed), "steps": str(steps)}
    return Checkpoint(arch=arch, tensors=params, meta=meta)


def finetune_task(base: Checkpoint, task: TaskSpec, steps: int, seed: int,
                  lr: float = 0.08, batch_size: int = 256,
                  tasks: list[TaskSpec] | None = None) -> Checkpoint:
    """Continue training on a single task, warping the shared trunk.

    Large batches with a large step size travel far from the base (degrading
    the other tasks) while still converging cleanly on the target task.
    """
    k = task.task_id
    if k > base.arch.num_tasks:
        raise DomainError(f"task {k} exceeds the {base.arch.num_tasks} declared heads")
    all_tasks = tasks if tasks is not None else [task]
    weights = np.zeros(len(all_tasks))
    weights[[t.task_id for t in all_tasks].index(k)] = 1.0
    params = _train(base, all_tasks, weights, steps, seed, lr, batch_size)
    arch = replace(base.arch, model_id=f"task{k}", base_id=base.arch.model_id)
    meta = {"kind": "finetuned", "task_id": str(k), "seed": str(seed), "steps": str(steps)}
    return Checkpoint(arch=arch, tensors=params, meta=meta)


def evaluate(model, tasks: list[TaskSpec], split: str = "val", seed: int = 0,
             limit: int | None = None) -> MetricVector:
    """Per-task accuracy of an executable model on the named split.

    With a limit, each task is scored on a seeded without-replacement
    subsample, which is how environment reward probes stay cheap.
    """
    if split not in ("val", "test"):
        raise DomainError(f"evaluation split must be 'val' or 'test', got {split!r}")
    values = []
    for k, task in enumerate(tasks):
        x, y = load_split(task, split)
        if limit is not None and limit < x.shape[0]:
            idx = probe_indices(seed, task.task_id, x.shape[0], limit)
            x, y = x[idx], y[idx]
        logits = model.predict_logits(x)
        if logits.ndim != 2 or logits.shape != (x.shape[0], len(tasks)):
            raise EvaluationError(
                f"model returned logits of shape {np.shape(logits)}, "
                f"expected {(x.shape[0], len(tasks))}"
            )
        pred = np.where(logits[:, k] > 0.0, 1, -1)
        values.append(float(np.mean(pred == y)))
    return MetricVector(values=tuple(values), eval_seed=seed, split=split)
