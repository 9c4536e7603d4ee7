"""Fine-tuning displacements and masked, scaled delta application.

Delta arithmetic runs in f32 working precision, or f64 when both inputs are
f64 (the toy test mode); narrowing to storage dtypes happens only at write
time. Half-precision accumulation would corrupt Bottom-K ordering and merge
reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .compat import CompatReport
from .errors import ConsistencyError
from .selection import SelectionMask
from .store import Checkpoint, write_arrays

WeightSource = Union[Checkpoint, Mapping[str, np.ndarray]]


@dataclass(frozen=True)
class TaskVector:
    """Per-tensor displacement fine - base over the compat-shared names."""

    deltas: dict[str, np.ndarray]
    base_id: str = ""
    fine_id: str = ""

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.deltas))


def read_value(source: WeightSource, name: str, upcast: bool = True) -> np.ndarray:
    if isinstance(source, Checkpoint):
        return source.read(name, upcast=upcast)
    arr = source[name]
    if upcast and arr.dtype == np.float16:
        return arr.astype(np.float32)
    return arr


def _has_name(source: WeightSource, name: str) -> bool:
    return name in source


def working_dtype(*arrays: np.ndarray) -> np.dtype:
    """f64 only when every input is f64; f32 otherwise."""
    if all(a.dtype == np.float64 for a in arrays):
        return np.dtype(np.float64)
    return np.dtype(np.float32)


def compute_task_vector(
    fine: WeightSource,
    base: WeightSource,
    compat: CompatReport,
    base_id: str = "",
    fine_id: str = "",
) -> TaskVector:
    """deltas[n] = fine[n] - base[n] for every n the compat report shares."""
    deltas: dict[str, np.ndarray] = {}
    for name in compat.shared:
        if not _has_name(fine, name) or not _has_name(base, name):
            raise ConsistencyError(
                f"compatibility report is stale: tensor {name!r} disappeared from an input"
            )
        f = read_value(fine, name)
        b = read_value(base, name)
        if f.shape != b.shape:
            raise ConsistencyError(
                f"compatibility report is stale: tensor {name!r} changed shape"
            )
        wd = working_dtype(f, b)
        deltas[name] = f.astype(wd, copy=False) - b.astype(wd, copy=False)
    return TaskVector(deltas=deltas, base_id=base_id, fine_id=fine_id)


def _require_mask_matches(tv: TaskVector, mask: SelectionMask) -> None:
    if mask.names != tv.names:
        raise ConsistencyError(
            "mask parameter-space mismatch: mask covers "
            f"{list(mask.names)}, task vector has {list(tv.names)}"
        )
    for name in tv.names:
        if mask.size(name) != tv.deltas[name].size:
            raise ConsistencyError(
                f"mask parameter-space mismatch: {name!r} has {tv.deltas[name].size} "
                f"parameters, mask covers {mask.size(name)}"
            )


def masked_contribution(
    delta: np.ndarray, mask_bools: np.ndarray, scale: float, wd: np.dtype
) -> tuple[np.ndarray, np.ndarray]:
    """(update positions, scaled values) for one tensor, flattened.

    Positions where the scaled delta is exactly zero are dropped: adding a
    zero there could still flip the sign of a stored -0.0, and λ=0 or an
    all-zero delta must reproduce the base bitwise.
    """
    contrib = np.asarray(delta, dtype=wd).ravel() * wd.type(scale)
    sel = mask_bools & (contrib != 0)
    return sel, contrib[sel]


def apply_masked_delta(
    base: WeightSource,
    tv: TaskVector,
    mask: SelectionMask,
    scale: float,
) -> dict[str, np.ndarray]:
    """base + scale * (delta ⊙ mask); non-eligible tensors copied from base."""
    _require_mask_matches(tv, mask)
    base_names = base.names() if isinstance(base, Checkpoint) else sorted(base)
    out: dict[str, np.ndarray] = {}
    for name in base_names:
        value = read_value(base, name)
        if name not in tv.deltas:
            out[name] = np.array(value, copy=True)
            continue
        delta = tv.deltas[name]
        wd = working_dtype(value, delta)
        flat = np.array(value, dtype=wd, copy=True).ravel()
        sel, vals = masked_contribution(delta, mask.bools(name), scale, wd)
        flat[sel] += vals
        out[name] = flat.reshape(value.shape)
    return out


def save_task_vector(path: str, tv: TaskVector) -> None:
    """Export as a checkpoint of f32 tensors named like the model."""
    arrays = {n: np.asarray(d, dtype=np.float32) for n, d in tv.deltas.items()}
    write_arrays(
        path, arrays, metadata={"base_id": tv.base_id, "fine_id": tv.fine_id}
    )
