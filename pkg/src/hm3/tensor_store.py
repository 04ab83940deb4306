"""Immutable named-tensor checkpoints, delta arithmetic, and the on-disk container.

A checkpoint holds the parameters of one residual MLP (input projection,
uniform-width hidden layers, one linear head per task) as named float32
tensors. Deltas are per-tensor differences against a shared base checkpoint.
Both are frozen after construction and safe to share across workers.

Container layout (magic ``HM3CKPT1``):

    bytes 0..7    ASCII magic
    bytes 8..15   unsigned 64-bit little-endian header length H
    bytes 16..16+H  UTF-8 JSON: {"arch": {...}, "meta": {...},
                    "tensors": [{"name", "shape", "dtype": "f32",
                                 "offset", "nbytes"}, ...]}
    remainder     little-endian float32 payloads, concatenated in header
                  order with no padding; offsets are relative to byte 16+H.

Tensor entries are ordered lexicographically by name so identical inputs
always serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DomainError,
    FormatError,
    Hm3Error,
    IncompatibilityError,
    NumericError,
    ValidationError,
)

__all__ = [
    "ArchDescriptor",
    "Checkpoint",
    "DeltaSet",
    "TRANSFORM_TAGS",
    "save_checkpoint",
    "load_checkpoint",
    "save_tensor_map",
    "load_tensor_map",
    "check_same_structure",
    "WriteError",
    "compute_delta",
    "apply_delta",
    "flatten_tensors",
    "unflatten_tensors",
]

MAGIC = b"HM3CKPT1"
TRANSFORM_TAGS = ("raw", "dare_rescaled", "trimmed")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ArchDescriptor:
    """Shape metadata for one model in the zoo.

    Every hidden layer maps hidden_width to hidden_width, so a layer taken
    from any sibling model fits at any position of an inference path.
    """

    num_layers: int
    hidden_width: int
    input_dim: int
    activation: str
    head_dims: tuple[int, ...]
    model_id: str
    base_id: str = ""

    def __post_init__(self):
        if self.num_layers < 1:
            raise DomainError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_width < 1:
            raise DomainError(f"hidden_width must be >= 1, got {self.hidden_width}")
        if self.input_dim < 1:
            raise DomainError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        if len(self.head_dims) < 1 or any(d < 1 for d in self.head_dims):
            raise DomainError(f"head_dims must be positive integers, got {self.head_dims}")

    @property
    def num_tasks(self) -> int:
        return len(self.head_dims)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        """Tensor name -> shape map fully determined by the architecture."""
        shapes: dict[str, tuple[int, ...]] = {
            "input.weight": (self.hidden_width, self.input_dim),
            "input.bias": (self.hidden_width,),
        }
        for i in range(1, self.num_layers + 1):
            shapes[f"layer{i}.weight"] = (self.hidden_width, self.hidden_width)
            shapes[f"layer{i}.bias"] = (self.hidden_width,)
        for k, dim in enumerate(self.head_dims, start=1):
            shapes[f"head_{k}.weight"] = (dim, self.hidden_width)
            shapes[f"head_{k}.bias"] = (dim,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_width": self.hidden_width,
            "input_dim": self.input_dim,
            "activation": self.activation,
            "head_dims": list(self.head_dims),
            "model_id": self.model_id,
            "base_id": self.base_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        try:
            return cls(
                num_layers=int(d["num_layers"]),
                hidden_width=int(d["hidden_width"]),
                input_dim=int(d["input_dim"]),
                activation=str(d["activation"]),
                head_dims=tuple(int(x) for x in d["head_dims"]),
                model_id=str(d["model_id"]),
                base_id=str(d.get("base_id", "")),
            )
        except KeyError as exc:
            raise FormatError(f"arch descriptor missing field {exc}") from exc


def _freeze_tensors(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float32))
        arr.flags.writeable = False
        out[name] = arr
    return out


def _check_finite(tensors: dict[str, np.ndarray], kind: str) -> None:
    for name in sorted(tensors):
        if not np.isfinite(tensors[name]).all():
            raise ValidationError(f"{kind} tensor '{name}' contains non-finite values")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """One model's parameters plus architecture metadata. Immutable."""

    arch: ArchDescriptor
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tensors", _freeze_tensors(self.tensors))
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in self.meta.items()})
        expected = self.arch.expected_shapes()
        got = set(self.tensors)
        want = set(expected)
        if got != want:
            missing = sorted(want - got)
            extra = sorted(got - want)
            raise IncompatibilityError(
                f"checkpoint '{self.arch.model_id}' tensor names do not match its "
                f"architecture: missing {missing}, unexpected {extra}"
            )
        for name in sorted(expected):
            if self.tensors[name].shape != expected[name]:
                raise IncompatibilityError(
                    f"tensor '{name}' has shape {self.tensors[name].shape}, "
                    f"expected {expected[name]}"
                )

    def validate_finite(self) -> None:
        _check_finite(self.tensors, "checkpoint")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.arch == other.arch
            and self.meta == other.meta
            and set(self.tensors) == set(other.tensors)
            and all(
                self.tensors[n].tobytes() == other.tensors[n].tobytes()
                for n in self.tensors
            )
        )

    def with_tensors(self, tensors: dict[str, np.ndarray], model_id: str | None = None,
                     meta: dict[str, str] | None = None) -> "Checkpoint":
        arch = self.arch if model_id is None else replace(self.arch, model_id=model_id)
        return Checkpoint(arch=arch, tensors=tensors,
                          meta=self.meta if meta is None else meta)


@dataclass(frozen=True, eq=False)
class DeltaSet:
    """Per-tensor task vector (fine-tuned minus base). Immutable."""

    base_id: str
    task_id: int
    tensors: dict[str, np.ndarray]
    transform_tag: str = "raw"

    def __post_init__(self):
        if self.transform_tag not in TRANSFORM_TAGS:
            raise DomainError(
                f"transform_tag must be one of {TRANSFORM_TAGS}, got {self.transform_tag!r}"
            )
        if self.task_id < 1:
            raise DomainError(f"task_id must be >= 1, got {self.task_id}")
        object.__setattr__(self, "tensors", _freeze_tensors(self.tensors))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DeltaSet):
            return NotImplemented
        return (
            self.base_id == other.base_id
            and self.task_id == other.task_id
            and self.transform_tag == other.transform_tag
            and set(self.tensors) == set(other.tensors)
            and all(
                self.tensors[n].tobytes() == other.tensors[n].tobytes()
                for n in self.tensors
            )
        )

    def with_tensors(self, tensors: dict[str, np.ndarray],
                     transform_tag: str | None = None) -> "DeltaSet":
        return DeltaSet(
            base_id=self.base_id,
            task_id=self.task_id,
            tensors=tensors,
            transform_tag=self.transform_tag if transform_tag is None else transform_tag,
        )


def check_same_structure(a: dict[str, np.ndarray], b: dict[str, np.ndarray],
                         a_label: str = "left", b_label: str = "right") -> None:
    """Raise IncompatibilityError naming the first mismatched tensor."""
    for name in sorted(set(a) | set(b)):
        if name not in a:
            raise IncompatibilityError(f"tensor '{name}' present in {b_label} but missing from {a_label}")
        if name not in b:
            raise IncompatibilityError(f"tensor '{name}' present in {a_label} but missing from {b_label}")
        if a[name].shape != b[name].shape:
            raise IncompatibilityError(
                f"tensor '{name}' shape mismatch: {a_label} {a[name].shape} vs "
                f"{b_label} {b[name].shape}"
            )


# --- container I/O ---------------------------------------------------------


class WriteError(Hm3Error, OSError):
    """I/O failure while writing a container, carrying the target path."""

    def __init__(self, path, cause: OSError):
        super().__init__(f"failed to write container to '{path}': {cause}")
        self.path = path


def save_tensor_map(path, tensors: dict[str, np.ndarray], arch: dict,
                    meta: dict[str, str] | None = None) -> None:
    """Write an arbitrary named-tensor map in the HM3CKPT1 container format."""
    meta = dict(meta or {})
    frozen = _freeze_tensors(tensors)
    _check_finite(frozen, "tensor-map")
    entries = []
    offset = 0
    payloads = []
    for name in sorted(frozen):
        arr = frozen[name]
        nbytes = 4 * arr.size
        entries.append({
            "name": name,
            "shape": [int(s) for s in arr.shape],
            "dtype": "f32",
            "offset": offset,
            "nbytes": nbytes,
        })
        payloads.append(arr.astype("<f4", copy=False).tobytes())
        offset += nbytes
    header = json.dumps(
        {"arch": arch, "meta": meta, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for blob in payloads:
                fh.write(blob)
    except OSError as exc:
        raise WriteError(path, exc) from exc


def load_tensor_map(path) -> tuple[dict[str, np.ndarray], dict, dict[str, str]]:
    """Read a HM3CKPT1 container; returns (tensors, arch dict, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError("file shorter than the fixed 16-byte preamble", offset=len(blob))
    magic = blob[:8]
    if magic != MAGIC:
        if magic[:7] == MAGIC[:7]:
            raise FormatError(
                f"unsupported version {magic.decode('ascii', 'replace')!r}", offset=0
            )
        raise FormatError(f"bad magic {magic!r}", offset=0)
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if 16 + header_len > len(blob):
        raise FormatError(
            f"header declares {header_len} bytes but file ends early", offset=len(blob)
        )
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", offset=16) from exc
    data = blob[16 + header_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        nbytes = int(entry["nbytes"])
        if entry.get("dtype") != "f32":
            raise FormatError(f"tensor '{name}' has unsupported dtype {entry.get('dtype')!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != 4 * count:
            raise FormatError(
                f"tensor '{name}' declares {nbytes} bytes for shape {shape}",
                offset=16 + header_len + offset,
            )
        if offset + nbytes > len(data):
            raise FormatError(
                f"tensor '{name}' payload truncated: header declares bytes "
                f"[{offset}, {offset + nbytes}) of a {len(data)}-byte data region",
                offset=16 + header_len + len(data),
            )
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float32, copy=True)
    return tensors, header.get("arch", {}), dict(header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize a checkpoint; identical checkpoints produce identical bytes."""
    ckpt.validate_finite()
    save_tensor_map(path, ckpt.tensors, ckpt.arch.to_dict(), ckpt.meta)


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint and re-validate it."""
    tensors, arch_dict, meta = load_tensor_map(path)
    arch = ArchDescriptor.from_dict(arch_dict)
    ckpt = Checkpoint(arch=arch, tensors=tensors, meta=meta)
    ckpt.validate_finite()
    return ckpt


# --- delta arithmetic ------------------------------------------------------


def compute_delta(fine: Checkpoint, base: Checkpoint, task_id: int | None = None) -> DeltaSet:
    """Per-tensor difference fine - base, tagged as a raw task vector."""
    check_same_structure(fine.tensors, base.tensors, "fine", "base")
    if task_id is None:
        task_id = int(fine.meta.get("task_id", 1))
    tensors = {n: fine.tensors[n] - base.tensors[n] for n in fine.tensors}
    return DeltaSet(
        base_id=base.arch.model_id,
        task_id=task_id,
        tensors=tensors,
        transform_tag="raw",
    )


def apply_delta(base: Checkpoint, delta: DeltaSet, scale: float,
                model_id: str | None = None) -> Checkpoint:
    """base + scale * delta, elementwise; result must stay finite."""
    check_same_structure(base.tensors, delta.tensors, "base", "delta")
    scale32 = np.float32(scale)
    out: dict[str, np.ndarray] = {}
    for name in sorted(base.tensors):
        arr = base.tensors[name] + scale32 * delta.tensors[name]
        if not np.isfinite(arr).all():
            raise NumericError(f"apply_delta overflowed in tensor '{name}'")
        out[name] = arr
    if model_id is None:
        model_id = f"{base.arch.model_id}+task{delta.task_id}*{scale:g}"
    return base.with_tensors(out, model_id=model_id)


# --- flat views (shared by trimming and sign election) ----------------------


def flatten_tensors(tensors: dict[str, np.ndarray]) -> tuple[np.ndarray, list[tuple[str, tuple[int, ...]]]]:
    """Concatenate tensors in lexicographic name order into one flat vector.

    Returns the flat float32 array and the (name, shape) layout needed to
    reverse the operation. Flat indices are the canonical coordinate order
    used for deterministic tie-breaking.
    """
    layout = [(name, tensors[name].shape) for name in sorted(tensors)]
    if not layout:
        return np.zeros(0, dtype=np.float32), layout
    flat = np.concatenate([tensors[name].reshape(-1) for name, _ in layout])
    return flat.astype(np.float32, copy=False), layout


def unflatten_tensors(flat: np.ndarray, layout: list[tuple[str, tuple[int, ...]]]) -> dict[str, np.ndarray]:
    """Inverse of flatten_tensors."""
    out: dict[str, np.ndarray] = {}
    pos = 0
    for name, shape in layout:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out[name] = flat[pos:pos + count].reshape(shape).astype(np.float32, copy=False)
        pos += count
    if pos != flat.size:
        raise DomainError(f"flat vector has {flat.size} entries, layout expects {pos}")
    return out
