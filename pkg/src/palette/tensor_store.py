"""Named-tensor checkpoints: a minimal safetensors-compatible container.

File layout: an 8-byte little-endian unsigned header length N, then N bytes
of UTF-8 JSON mapping tensor name -> {"dtype": "F32", "shape": [...],
"data_offsets": [begin, end]} plus an optional "__metadata__" string map,
then the raw little-endian tensor buffer. Offsets are relative to the
buffer start and must be non-overlapping and ascending in lexicographic
name order. Only F32 tensors are supported.

Saving is byte-deterministic: the same checkpoint always produces an
identical file.
"""

from __future__ import annotations

import json
import math
import re
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .common import atomic_write_bytes
from .errors import (
    DuplicateName,
    EmptySelectionWarning,
    IoFailure,
    MalformedHeader,
    SchemaMismatch,
    ShapeMismatch,
)

F32_BYTES = 4


@dataclass
class TensorSpec:
    """One named dense tensor: flat row-major float32 data plus its shape."""

    name: str
    shape: tuple[int, ...]
    data: np.ndarray
    dtype: str = "F32"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        self.validate()

    @classmethod
    def from_array(cls, name: str, array) -> "TensorSpec":
        arr = np.asarray(array, dtype=np.float32)
        return cls(name=name, shape=arr.shape, data=arr.reshape(-1))

    def validate(self) -> None:
        if not self.name:
            raise ShapeMismatch("tensor name must be non-empty")
        if self.dtype != "F32":
            raise ShapeMismatch(f"unsupported dtype {self.dtype!r} for tensor {self.name!r}")
        if any(s <= 0 for s in self.shape):
            raise ShapeMismatch(f"non-positive dimension in shape {self.shape} of {self.name!r}")
        if math.prod(self.shape) != self.data.size:
            raise ShapeMismatch(
                f"tensor {self.name!r}: shape {self.shape} implies {math.prod(self.shape)} "
                f"elements but data has {self.data.size}"
            )

    def array(self) -> np.ndarray:
        """Data viewed in its declared shape."""
        return self.data.reshape(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data.size * F32_BYTES

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorSpec):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )


class Checkpoint:
    """An immutable-by-convention map of tensors, iterated lexicographically."""

    def __init__(self, tensors: Iterable[TensorSpec] = (), metadata: Mapping[str, str] | None = None):
        by_name: dict[str, TensorSpec] = {}
        for spec in tensors:
            if spec.name in by_name:
                raise DuplicateName(f"duplicate tensor name {spec.name!r}")
            by_name[spec.name] = spec
        self._tensors = {name: by_name[name] for name in sorted(by_name)}
        self.metadata: dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __getitem__(self, name: str) -> TensorSpec:
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    def specs(self):
        return self._tensors.values()

    def with_metadata(self, **entries: str) -> "Checkpoint":
        md = dict(self.metadata)
        md.update({k: str(v) for k, v in entries.items()})
        return Checkpoint(self.specs(), md)

    def schema(self) -> dict[str, tuple[int, ...]]:
        return {name: spec.shape for name, spec in self.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and self.names == other.names
            and all(self[n] == other[n] for n in self.names)
        )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize deterministically; same checkpoint -> identical bytes."""
    for spec in ckpt.specs():
        spec.validate()

    header: dict[str, object] = {}
    offset = 0
    blobs = []
    for name, spec in ckpt.items():
        end = offset + spec.nbytes
        header[name] = {"dtype": "F32", "shape": list(spec.shape), "data_offsets": [offset, end]}
        blobs.append(spec.data.astype("<f4", copy=False).tobytes())
        offset = end
    if ckpt.metadata:
        header["__metadata__"] = dict(sorted(ckpt.metadata.items()))

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")
    payload = struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(blobs)
    try:
        atomic_write_bytes(Path(path), payload)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint to {path}: {exc}") from exc


def _reject_duplicate_keys(pairs):
    seen = set()
    out = {}
    for key, value in pairs:
        if key in seen:
            raise DuplicateName(f"duplicate tensor name {key!r} in header")
        seen.add(key)
        out[key] = value
    return out


def load_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file, validating the header and all offsets."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint from {path}: {exc}") from exc

    if len(raw) < 8:
        raise MalformedHeader(f"file too short for length prefix ({len(raw)} bytes)")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise MalformedHeader(f"declared header length {header_len} exceeds file size {len(raw)}")

    try:
        header_text = raw[8 : 8 + header_len].decode("utf-8")
        header = json.loads(header_text, object_pairs_hook=_reject_duplicate_keys)
    except DuplicateName:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header JSON must be an object")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must be a string-to-string map")

    buffer = raw[8 + header_len :]
    specs = []
    prev_end = 0
    for name in sorted(header):
        entry = header[name]
        if not name:
            raise MalformedHeader("empty tensor name in header")
        if not isinstance(entry, dict):
            raise MalformedHeader(f"entry for {name!r} must be an object")
        dtype = entry.get("dtype")
        if dtype != "F32":
            raise MalformedHeader(f"tensor {name!r}: unsupported dtype {dtype!r} (only F32)")
        shape = entry.get("shape")
        if (
            not isinstance(shape, list)
            or not shape
            or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)
        ):
            raise MalformedHeader(f"tensor {name!r}: shape must be a list of positive integers")
        offsets = entry.get("data_offsets")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
            or offsets[0] > offsets[1]
        ):
            raise MalformedHeader(f"tensor {name!r}: bad data_offsets {offsets!r}")
        begin, end = offsets
        if begin < prev_end:
            raise MalformedHeader(
                f"tensor {name!r}: offsets overlap or are out of lexicographic order"
            )
        if end > len(buffer):
            raise MalformedHeader(f"tensor {name!r}: offsets extend past the data buffer")
        expected = math.prod(shape) * F32_BYTES
        if end - begin != expected:
            raise ShapeMismatch(
                f"tensor {name!r}: offsets span {end - begin} bytes but shape {shape} needs {expected}"
            )
        data = np.frombuffer(buffer[begin:end], dtype="<f4").astype(np.float32, copy=True)
        specs.append(TensorSpec(name=name, shape=tuple(shape), data=data))
        prev_end = end

    return Checkpoint(specs, metadata)


def _check_same_schema(a: Checkpoint, b: Checkpoint, what: str = "checkpoints") -> None:
    if a.names != b.names:
        only_a = sorted(set(a.names) - set(b.names))
        only_b = sorted(set(b.names) - set(a.names))
        raise SchemaMismatch(
            f"{what} have different tensor names", only_first=only_a, only_second=only_b
        )
    for name in a.names:
        if a[name].shape != b[name].shape:
            raise SchemaMismatch(
                f"{what}: tensor {name!r} shapes differ: {a[name].shape} vs {b[name].shape}"
            )


def delta(a: Checkpoint, b: Checkpoint) -> Checkpoint:
    """Element-wise a - b over every tensor; schemas must match exactly."""
    _check_same_schema(a, b)
    specs = [
        TensorSpec(name=name, shape=spec.shape, data=spec.data - b[name].data)
        for name, spec in a.items()
    ]
    return Checkpoint(specs, a.metadata)


@dataclass(frozen=True)
class TensorSubset:
    """An ordered set of tensor names selected from some checkpoint."""

    names: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names


def _glob_to_regex(pattern: str) -> re.Pattern:
    # Only * and ? wildcards; everything else (including brackets) is literal.
    parts = []
    for ch in pattern:
        if ch == "*":
            parts.append(".*")
        elif ch == "?":
            parts.append(".")
        else:
            parts.append(re.escape(ch))
    return re.compile("".join(parts) + r"\Z")


def select_ffn(ckpt: Checkpoint, pattern: str = "*.ffn.*") -> TensorSubset:
    """Select tensor names matching a glob (feed-forward tensors by default).

    An empty match warns (EmptySelectionWarning) but still returns the
    empty subset.
    """
    rx = _glob_to_regex(pattern)
    names = tuple(name for name in ckpt.names if rx.match(name))
    if not names:
        warnings.warn(f"pattern {pattern!r} matched no tensors", EmptySelectionWarning, stacklevel=2)
    return TensorSubset(names=names)
