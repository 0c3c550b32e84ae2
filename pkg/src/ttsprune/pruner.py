"""Global unstructured magnitude pruning and mask algebra."""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .params import ParamStore, decode, encode, prunable_vector


@dataclass(frozen=True)
class PruneMask:
    """Binary keep-mask over the prunable tensors of a store (1 = keep)."""

    entries: Mapping[str, np.ndarray]

    def __post_init__(self):
        entries = {}
        for name in sorted(self.entries):
            arr = np.asarray(self.entries[name])
            if not np.isin(arr, (0, 1)).all():
                raise ValueError(f"mask {name!r} has values other than 0/1")
            arr = arr.astype(bool)
            arr.setflags(write=False)
            entries[name] = arr
        object.__setattr__(self, "entries", entries)

    def __getitem__(self, name):
        return self.entries[name]

    def names(self):
        return list(self.entries)

    @property
    def size(self):
        return sum(a.size for a in self.entries.values())

    @property
    def zero_count(self):
        return sum(int((~a).sum()) for a in self.entries.values())

    def vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.entries.values()])

    def equals(self, other: "PruneMask") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(a, other[n]) for n, a in self.entries.items())

    @classmethod
    def ones_like(cls, store: ParamStore) -> "PruneMask":
        return cls({n: np.ones(store[n].shape, dtype=bool) for n in store.prunable_names()})


@dataclass
class SparsityReport:
    global_sparsity: float
    zero_count: int
    total: int
    per_tensor: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "global_sparsity": self.global_sparsity,
            "zero_count": self.zero_count,
            "total": self.total,
            "per_tensor": self.per_tensor,
        }


def num_to_prune(target_sparsity, d: int) -> int:
    """k = round(s * d) with halves rounded up, computed exactly.

    A float ``s`` is read as the decimal it prints as, so 0.3 means 3/10 and
    0.3 * 1185 = 355.5 rounds to 356 (the binary value of 0.3 would give 355).
    """
    s = target_sparsity if isinstance(target_sparsity, Fraction) else Fraction(repr(float(target_sparsity)))
    return math.floor(s * d + Fraction(1, 2))


def _check_sparsity(s):
    if not (0 <= s < 1):
        raise ValueError(f"target sparsity must be in [0, 1), got {s}")


def _unflatten(store: ParamStore, keep: np.ndarray) -> PruneMask:
    entries, pos = {}, 0
    for name in store.prunable_names():
        shape = store[name].shape
        n = store[name].size
        entries[name] = keep[pos : pos + n].reshape(shape)
        pos += n
    return PruneMask(entries)


def ump(store: ParamStore, target_sparsity: float, fixed: Optional[PruneMask] = None) -> PruneMask:
    """Zero the ``round(s*d)`` smallest-magnitude prunable weights, globally.

    Ties go to the coordinate that comes first in ``flatten_prunable`` order.
    With ``fixed``, coordinates already zero in that mask stay pruned and the
    remaining budget is filled from the surviving weights only.
    """
    _check_sparsity(target_sparsity)
    values = prunable_vector(store)
    d = values.size
    k = num_to_prune(target_sparsity, d)
    keep = np.ones(d, dtype=bool)

    if fixed is not None:
        _check_coverage(store, fixed)
        forced = ~fixed.vector()
        n_forced = int(forced.sum())
        if n_forced > k:
            raise ValueError(f"fixed mask already prunes {n_forced} > {k} coordinates")
        keep[forced] = False
        candidates = np.flatnonzero(~forced)
        order = candidates[np.argsort(np.abs(values[candidates]), kind="stable")]
        keep[order[: k - n_forced]] = False
    else:
        order = np.argsort(np.abs(values), kind="stable")
        keep[order[:k]] = False
    return _unflatten(store, keep)


def _check_coverage(store: ParamStore, mask: PruneMask):
    names = store.prunable_names()
    if mask.names() != names:
        raise ValueError(f"mask covers {mask.names()}, store's prunable set is {names}")
    for n in names:
        if mask[n].shape != store[n].shape:
            raise ValueError(f"mask shape mismatch for {n!r}: {mask[n].shape} vs {store[n].shape}")


def apply_mask(store: ParamStore, mask: PruneMask) -> ParamStore:
    _check_coverage(store, mask)
    return store.replace({n: store[n] * mask[n] for n in mask.names()})


def sparsity(mask: PruneMask) -> float:
    return mask.zero_count / mask.size


def sparsity_report(mask: PruneMask) -> SparsityReport:
    per_tensor = {n: int((~a).sum()) / a.size for n, a in mask.entries.items()}
    return SparsityReport(sparsity(mask), mask.zero_count, mask.size, per_tensor)


def mask_overlap(m1: PruneMask, m2: PruneMask) -> float:
    """Intersection-over-union of the pruned coordinate sets (1.0 if neither prunes anything)."""
    if m1.names() != m2.names() or any(m1[n].shape != m2[n].shape for n in m1.names()):
        raise ValueError("masks cover different tensors")
    z1, z2 = ~m1.vector(), ~m2.vector()
    union = int((z1 | z2).sum())
    if union == 0:
        return 1.0
    return int((z1 & z2).sum()) / union


def save_mask(mask: PruneMask, path) -> None:
    data = encode(((n, a.astype(np.float32), True) for n, a in mask.entries.items()), mask=True)
    Path(path).write_bytes(data)


def load_mask(path) -> PruneMask:
    manifest, arrays = decode(Path(path).read_bytes())
    if not manifest.get("mask"):
        raise ValueError(f"{path} is a checkpoint, not a mask file")
    return PruneMask(arrays)
