"""Named float32 tensors with a prunable subset, plus the PRNT1 checkpoint container.

File layout::

    b"PRNT1"                      5 bytes
    manifest length               8 bytes, little-endian unsigned
    manifest                      UTF-8 JSON
    tensor blobs                  little-endian float32, manifest order

The manifest lists tensors in lexicographic name order with their shape,
prunable flag and byte offset (relative to the first blob).
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"PRNT1"
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint file."""


class NonFiniteError(ValueError):
    """A tensor holds NaN or Inf where finite values are required."""


def _as_tensor(name, value):
    arr = np.array(value, dtype=np.float32, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(dim < 1 for dim in arr.shape):
        raise ValueError(f"tensor {name!r} has a zero-sized dimension {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParamStore:
    """Immutable mapping of tensor name to float32 array.

    ``prunable`` names the tensors magnitude pruning may touch. Iteration is
    always in lexicographic name order.
    """

    entries: Mapping[str, np.ndarray]
    prunable: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        entries = {name: _as_tensor(name, self.entries[name]) for name in sorted(self.entries)}
        prunable = frozenset(self.prunable)
        unknown = prunable - entries.keys()
        if unknown:
            raise KeyError(f"prunable names not in store: {sorted(unknown)}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "prunable", prunable)

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def names(self):
        return list(self.entries)

    def prunable_names(self):
        return [n for n in self.entries if n in self.prunable]

    @property
    def num_params(self):
        return sum(a.size for a in self.entries.values())

    @property
    def num_prunable(self):
        return sum(self.entries[n].size for n in self.prunable)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamStore":
        """Return a new store with some tensors swapped out (shapes must match)."""
        entries = dict(self.entries)
        for name, value in updates.items():
            if name not in entries:
                raise KeyError(name)
            value = np.asarray(value)
            if value.shape != entries[name].shape:
                raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {entries[name].shape}")
            entries[name] = value
        return ParamStore(entries, self.prunable)

    def to_dict(self, dtype=np.float32):
        """Writable copies of every tensor."""
        return {name: np.array(a, dtype=dtype) for name, a in self.entries.items()}

    def is_finite(self):
        return all(np.isfinite(a).all() for a in self.entries.values())

    def equals(self, other: "ParamStore") -> bool:
        """Bit-level equality of names, shapes, values and prunable flags."""
        if self.names() != other.names() or self.prunable != other.prunable:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.entries.values(), other.entries.values())
        )


def flatten_prunable(store: ParamStore) -> list:
    """List ``(name, flat_index, value)`` over every prunable coordinate.

    Order is by tensor name, then ascending row-major index.
    """
    names = store.prunable_names()
    if not names:
        raise ValueError("store has no prunable tensors")
    out = []
    for name in names:
        flat = store[name].ravel()
        out.extend((name, i, float(v)) for i, v in enumerate(flat))
    return out


def prunable_vector(store: ParamStore) -> np.ndarray:
    """Concatenated prunable values in ``flatten_prunable`` order."""
    names = store.prunable_names()
    if not names:
        raise ValueError("store has no prunable tensors")
    return np.concatenate([store[n].ravel() for n in names])


def _check_finite(name, arr):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"tensor {name!r} contains non-finite values")


def encode(tensors: Iterable, *, mask: bool = False) -> bytes:
    """Serialize ``(name, array, prunable)`` triples into PRNT1 bytes."""
    items = sorted(tensors, key=lambda t: t[0])
    manifest = {"mask": mask, "tensors": []}
    blobs = []
    offset = 0
    for name, arr, prunable in items:
        arr = np.asarray(arr, dtype=np.float32)
        _check_finite(name, arr)
        blob = arr.astype(_DTYPE, copy=False).tobytes(order="C")
        manifest["tensors"].append(
            {"name": name, "shape": list(arr.shape), "prunable": bool(prunable), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(header)) + header + b"".join(blobs)


def decode(data: bytes):
    """Parse PRNT1 bytes into ``(manifest, {name: array})``."""
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a PRNT1 file")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise CheckpointError("truncated header")
    (hlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + hlen:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[pos : pos + hlen].decode("utf-8"))
        entries_meta = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    pos += hlen
    body = memoryview(data)[pos:]

    names = [e["name"] for e in entries_meta]
    if names != sorted(names) or len(set(names)) != len(names):
        raise CheckpointError("manifest names must be unique and sorted")
    expected = 0
    arrays = {}
    for entry in entries_meta:
        shape = tuple(int(d) for d in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if entry["offset"] != expected:
            raise CheckpointError(f"offset mismatch for {entry['name']!r}")
        if expected + nbytes > len(body):
            raise CheckpointError(
                f"length mismatch: {entry['name']!r} needs {nbytes} bytes at {expected}, "
                f"blob section has {len(body)}"
            )
        arr = np.frombuffer(body[expected : expected + nbytes], dtype=_DTYPE).reshape(shape)
        _check_finite(entry["name"], arr)
        arrays[entry["name"]] = arr.astype(np.float32)
        expected += nbytes
    if expected != len(body):
        raise CheckpointError(f"length mismatch: {len(body) - expected} trailing bytes")
    return manifest, arrays


def save_checkpoint(store: ParamStore, path) -> None:
    data = encode((n, store[n], n in store.prunable) for n in store.names())
    Path(path).write_bytes(data)


def load_checkpoint(path) -> ParamStore:
    manifest, arrays = decode(Path(path).read_bytes())
    prunable = {s["name"] for s in manifest["tensors"] if s["prunable"]}
    return ParamStore(arrays, prunable)
