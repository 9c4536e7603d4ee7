"""Top-K / Bottom-K selection over the flattened parameter space.

Ranking is global by default: scores from every tensor compete in one pool,
ordered by value with ties broken canonically (tensor name lexicographic,
then row-major flat index ascending). Selection is exact: |selected| is
round(p*d) half-up, ties at the threshold included, with the
exclude-exact-zero cap as the sole exception.

The selector never materializes a global sort. Non-negative f32 scores have
monotone bit patterns, so pass 1 histograms the top 16 bits of each score to
locate the threshold bin and pass 2 collects indices, with an exact stable
sort only over the boundary bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConsistencyError, ValidationError
from .importance import ImportanceMap
from .store import TensorEntry, write_checkpoint

SCOPE_GLOBAL = "global"
SCOPE_PER_TENSOR = "per_tensor"
ZERO_INCLUDE = "include"
ZERO_EXCLUDE = "exclude_zero"

TIE_BREAK_VERSION = "canonical-order-v1"

_BINS = 1 << 16


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class SelectionMask:
    """Per-tensor bit arrays over row-major flat indices."""

    scope: str
    ratio: float
    bits: dict[str, np.ndarray]           # packed uint8 per tensor
    shapes: dict[str, tuple[int, ...]]
    cardinality: int = field(init=False)

    def __post_init__(self):
        total = sum(self.count(n) for n in self.bits)
        object.__setattr__(self, "cardinality", total)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.bits))

    def size(self, name: str) -> int:
        n = 1
        for extent in self.shapes[name]:
            n *= extent
        return n

    def total_params(self) -> int:
        return sum(self.size(n) for n in self.bits)

    def bools(self, name: str) -> np.ndarray:
        return np.unpackbits(self.bits[name], count=self.size(name)).astype(bool)

    def bool_map(self) -> dict[str, np.ndarray]:
        return {n: self.bools(n) for n in self.names}

    def count(self, name: str) -> int:
        return int(np.unpackbits(self.bits[name], count=self.size(name)).sum())

    def selected_pairs(self) -> list[tuple[str, int]]:
        pairs: list[tuple[str, int]] = []
        for name in self.names:
            for idx in np.flatnonzero(self.bools(name)):
                pairs.append((name, int(idx)))
        return pairs

    def same_space(self, other: "SelectionMask") -> bool:
        return self.names == other.names and all(
            self.shapes[n] == other.shapes[n] for n in self.names
        )

    def same_selection(self, other: "SelectionMask") -> bool:
        return self.same_space(other) and all(
            np.array_equal(self.bits[n], other.bits[n]) for n in self.names
        )


def mask_from_bools(
    bools: Mapping[str, np.ndarray],
    shapes: Mapping[str, tuple[int, ...]],
    scope: str,
    ratio: float,
) -> SelectionMask:
    packed = {n: np.packbits(np.asarray(bools[n], dtype=bool).ravel()) for n in bools}
    return SelectionMask(
        scope=scope,
        ratio=ratio,
        bits=packed,
        shapes={n: tuple(shapes[n]) for n in bools},
    )


def _score_entries(imp: ImportanceMap, exclude_zero: bool):
    """Canonical-order (name, monotone uint32 keys, eligibility) triples.

    Zero scores are canonicalized so a stray -0.0 cannot break key
    monotonicity.
    """
    entries = []
    for name in sorted(imp.scores):
        x = np.ascontiguousarray(imp.scores[name], dtype=np.float32).ravel()
        keys = x.view(np.uint32).copy()
        keys[x == 0] = np.uint32(0)
        eligible = (keys != 0) if exclude_zero else None
        entries.append((name, keys, eligible))
    return entries


def _select_exact(entries, k: int, largest: bool) -> dict[str, np.ndarray]:
    """Exact k-selection over all entries; returns flat bool arrays."""
    out = {name: np.zeros(keys.shape, dtype=bool) for name, keys, _ in entries}
    hist = np.zeros(_BINS, dtype=np.int64)
    for _, keys, eligible in entries:
        bins = (keys >> np.uint32(16)).astype(np.int64)
        if eligible is not None:
            bins = bins[eligible]
        if bins.size:
            hist += np.bincount(bins, minlength=_BINS)
    k = min(k, int(hist.sum()))
    if k <= 0:
        return out

    walk = range(_BINS - 1, -1, -1) if largest else range(_BINS)
    cum = 0
    threshold_bin = 0
    for b in walk:
        c = int(hist[b])
        if cum + c >= k:
            threshold_bin = b
            break
        cum += c
    need = k - cum

    boundary_keys: list[np.ndarray] = []
    boundary_idx: list[np.ndarray] = []
    boundary_entry: list[np.ndarray] = []
    for entry_i, (name, keys, eligible) in enumerate(entries):
        bins = keys >> np.uint32(16)
        definite = bins > threshold_bin if largest else bins < threshold_bin
        at_threshold = bins == threshold_bin
        if eligible is not None:
            definite &= eligible
            at_threshold &= eligible
        out[name][definite] = True
        idx = np.flatnonzero(at_threshold)
        if idx.size:
            boundary_keys.append(keys[idx])
            boundary_idx.append(idx)
            boundary_entry.append(np.full(idx.size, entry_i, dtype=np.int64))

    if need > 0 and boundary_keys:
        bk = np.concatenate(boundary_keys)
        bi = np.concatenate(boundary_idx)
        be = np.concatenate(boundary_entry)
        sort_keys = (np.uint32(0xFFFFFFFF) - bk) if largest else bk
        chosen = np.argsort(sort_keys, kind="stable")[:need]
        for entry_i, (name, _, _) in enumerate(entries):
            sel = bi[chosen[be[chosen] == entry_i]]
            out[name][sel] = True
    return out


def _select(imp: ImportanceMap, p: float, scope: str, largest: bool, zero_policy: str) -> SelectionMask:
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"selection ratio {p} is outside [0, 1]")
    if scope not in (SCOPE_GLOBAL, SCOPE_PER_TENSOR):
        raise ValidationError(f"unknown selection scope {scope!r}")
    if zero_policy not in (ZERO_INCLUDE, ZERO_EXCLUDE):
        raise ValidationError(f"unknown zero policy {zero_policy!r}")
    entries = _score_entries(imp, exclude_zero=zero_policy == ZERO_EXCLUDE)
    shapes = {n: tuple(np.asarray(imp.scores[n]).shape) for n in imp.scores}
    if scope == SCOPE_GLOBAL:
        d = sum(keys.size for _, keys, _ in entries)
        bools = _select_exact(entries, round_half_up(p * d), largest)
    else:
        bools = {}
        for entry in entries:
            k = round_half_up(p * entry[1].size)
            bools.update(_select_exact([entry], k, largest))
    return mask_from_bools(bools, shapes, scope, p)


def select_topk(imp: ImportanceMap, p: float, scope: str = SCOPE_GLOBAL) -> SelectionMask:
    """The round(p*d) highest-importance indices."""
    return _select(imp, p, scope, largest=True, zero_policy=ZERO_INCLUDE)


def select_bottomk(
    imp: ImportanceMap,
    p: float,
    scope: str = SCOPE_GLOBAL,
    zero_policy: str = ZERO_INCLUDE,
) -> SelectionMask:
    """The round(p*d) lowest-importance indices.

    Under exclude_zero, exactly-zero scores never enter the pool and k is
    capped at the nonzero count.
    """
    return _select(imp, p, scope, largest=False, zero_policy=zero_policy)


def _require_same_space(a: SelectionMask, b: SelectionMask) -> None:
    if not a.same_space(b):
        raise ConsistencyError("mask parameter-space mismatch")


def exclude(a: SelectionMask, b: SelectionMask) -> tuple[SelectionMask, SelectionMask]:
    """Mutual set exclusion: (a minus b, b minus a). Outputs are disjoint."""
    _require_same_space(a, b)
    a_only = {n: a.bits[n] & ~b.bits[n] for n in a.names}
    b_only = {n: b.bits[n] & ~a.bits[n] for n in a.names}
    return (
        SelectionMask(scope=a.scope, ratio=a.ratio, bits=a_only, shapes=dict(a.shapes)),
        SelectionMask(scope=b.scope, ratio=b.ratio, bits=b_only, shapes=dict(b.shapes)),
    )


def complement(mask: SelectionMask) -> SelectionMask:
    bools = {n: ~mask.bools(n) for n in mask.names}
    return mask_from_bools(bools, mask.shapes, mask.scope, 1.0 - mask.ratio)


def intersection_count(a: SelectionMask, b: SelectionMask) -> int:
    _require_same_space(a, b)
    total = 0
    for n in a.names:
        both = a.bits[n] & b.bits[n]
        total += int(np.unpackbits(both, count=a.size(n)).sum())
    return total


def is_disjoint(a: SelectionMask, b: SelectionMask) -> bool:
    _require_same_space(a, b)
    return all(not (a.bits[n] & b.bits[n]).any() for n in a.names)


def mask_stats(mask: SelectionMask, other: SelectionMask | None = None) -> dict:
    """Counts and density; adds the pre-exclusion overlap when two are given."""
    d = mask.total_params()
    stats = {
        "count": mask.cardinality,
        "per_tensor": {n: mask.count(n) for n in mask.names},
        "density": (mask.cardinality / d) if d else 0.0,
        "total_params": d,
        "scope": mask.scope,
        "ratio": mask.ratio,
    }
    if other is not None:
        stats["overlap"] = intersection_count(mask, other)
    return stats


def save_mask(path: str, mask: SelectionMask, importance_id: str = "") -> None:
    """Export as a checkpoint of 0/1 u8 tensors in the model's shapes."""
    entries = {}
    for name in mask.names:
        arr = mask.bools(name).astype(np.uint8).reshape(mask.shapes[name])
        entries[name] = TensorEntry(dtype="U8", data=arr)
    write_checkpoint(
        path,
        entries,
        metadata={
            "ratio": repr(mask.ratio),
            "scope": mask.scope,
            "tie_break": TIE_BREAK_VERSION,
            "importance_id": importance_id,
        },
    )
