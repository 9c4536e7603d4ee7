"""Cross-checkpoint compatibility: which tensors can participate in a merge.

A tensor is eligible when it exists in every input with the same shape and a
float dtype, and survives the name filters. Everything else lands in
``skipped`` with a reason; integer tensors are copied from the base model
verbatim rather than merged.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import dtypes
from .store import Checkpoint

WeightSource = Union[Checkpoint, Mapping[str, np.ndarray]]


@dataclass(frozen=True)
class CompatReport:
    """Shared names are sorted lexicographically; that order is canonical."""

    shared: tuple[str, ...]
    skipped: dict[str, str] = field(default_factory=dict)
    eligible_param_count: int = 0


def _meta(source: WeightSource) -> dict[str, tuple[tuple[int, ...], str]]:
    if isinstance(source, Checkpoint):
        return {n: (source.info(n).shape, source.info(n).dtype) for n in source.names()}
    return {
        n: (tuple(a.shape), dtypes.storage_name_for_array(a)) for n, a in source.items()
    }


def _passes_filters(
    name: str,
    include_patterns: Sequence[str] | None,
    exclude_patterns: Sequence[str] | None,
) -> bool:
    if include_patterns and not any(fnmatch.fnmatchcase(name, p) for p in include_patterns):
        return False
    if exclude_patterns and any(fnmatch.fnmatchcase(name, p) for p in exclude_patterns):
        return False
    return True


def validate_compatibility(
    sources: Sequence[WeightSource],
    include_patterns: Sequence[str] | None = None,
    exclude_patterns: Sequence[str] | None = None,
    labels: Sequence[str] | None = None,
) -> CompatReport:
    """Report which tensor names all ``sources`` agree on.

    Never raises on disagreement; mismatches are recorded in ``skipped`` so a
    partially compatible pair of checkpoints still merges over its overlap.
    """
    if len(sources) < 2:
        raise ValueError("validate_compatibility needs at least two weight maps")
    if labels is None:
        labels = [f"input {i}" for i in range(len(sources))]
    metas = [_meta(s) for s in sources]

    all_names = sorted(set().union(*metas))
    shared: list[str] = []
    skipped: dict[str, str] = {}
    eligible = 0
    for name in all_names:
        if not _passes_filters(name, include_patterns, exclude_patterns):
            skipped[name] = "filtered"
            continue
        missing = [labels[i] for i, m in enumerate(metas) if name not in m]
        if missing:
            skipped[name] = f"missing in {missing[0]}"
            continue
        shapes = {m[name][0] for m in metas}
        if len(shapes) > 1:
            detail = " vs ".join(
                f"{list(m[name][0])} in {labels[i]}" for i, m in enumerate(metas)
            )
            skipped[name] = f"shape-mismatch: {detail}"
            continue
        nonfloat = [labels[i] for i, m in enumerate(metas) if not dtypes.is_float(m[name][1])]
        if nonfloat:
            skipped[name] = f"non-float dtype in {nonfloat[0]}"
            continue
        shared.append(name)
        count = 1
        for extent in metas[0][name][0]:
            count *= extent
        eligible += count

    return CompatReport(
        shared=tuple(shared), skipped=skipped, eligible_param_count=eligible
    )
