"""Gradient-magnitude importance maps.

An importance score is the mean absolute gradient of the loss with respect to
one parameter, taken over a calibration set. Scores are non-negative finite
f32; accumulation happens in f64 because 100-sample means of tiny magnitudes
lose bits in f32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import dtypes
from .errors import ConsistencyError, ValidationError
from .store import Checkpoint, open_checkpoint, write_arrays

GradientMap = Mapping[str, np.ndarray]
WeightSource = Union[Checkpoint, Mapping[str, np.ndarray]]


@dataclass(frozen=True)
class ImportanceMap:
    """Per-parameter scores plus the provenance of the calibration run."""

    scores: dict[str, np.ndarray]
    calibration_id: str = ""
    sample_count: int = 0
    model_id: str = ""
    names: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(sorted(self.scores)))

    def total_params(self) -> int:
        return sum(int(v.size) for v in self.scores.values())


def validate_scores(scores: Mapping[str, np.ndarray]) -> None:
    """Reject negative or non-finite entries, naming tensor and flat index."""
    for name in sorted(scores):
        flat = np.asarray(scores[name]).ravel()
        bad = np.flatnonzero(~np.isfinite(flat))
        if bad.size:
            raise ValidationError(f"non-finite importance at {name}[{int(bad[0])}]")
        neg = np.flatnonzero(flat < 0)
        if neg.size:
            raise ValidationError(f"negative importance at {name}[{int(neg[0])}]")


def average_abs_gradients(
    grads: Sequence[GradientMap],
    calibration_id: str = "",
    model_id: str = "",
) -> ImportanceMap:
    """Mean of absolute per-sample gradients, elementwise.

    Per element, the absolute values are summed in ascending order in f64,
    so the result is bit-identical under any permutation of the samples.
    All samples are held at once; this is sized for calibration-scale input.
    """
    if not grads:
        raise ValidationError("cannot average an empty gradient sequence")
    names = sorted(grads[0])
    shapes = {n: tuple(np.asarray(grads[0][n]).shape) for n in names}
    for i, g in enumerate(grads):
        if sorted(g) != names:
            raise ConsistencyError(f"gradient sample {i} has a different tensor name set")
        for n in names:
            if tuple(np.asarray(g[n]).shape) != shapes[n]:
                raise ConsistencyError(
                    f"gradient sample {i} has shape {list(np.asarray(g[n]).shape)} "
                    f"for {n!r}, expected {list(shapes[n])}"
                )
    count = len(grads)
    scores: dict[str, np.ndarray] = {}
    for n in names:
        stacked = np.abs(np.stack([np.asarray(g[n], dtype=np.float64) for g in grads]))
        stacked.sort(axis=0)
        acc = np.zeros(shapes[n], dtype=np.float64)
        for s in range(count):
            acc += stacked[s]
        scores[n] = (acc / count).astype(np.float32)
    return ImportanceMap(
        scores=scores,
        calibration_id=calibration_id,
        sample_count=count,
        model_id=model_id,
    )


def _model_float_meta(model: WeightSource) -> dict[str, tuple[int, ...]]:
    if isinstance(model, Checkpoint):
        return {
            n: model.info(n).shape
            for n in model.names()
            if dtypes.is_float(model.info(n).dtype)
        }
    return {
        n: tuple(a.shape)
        for n, a in model.items()
        if dtypes.is_float(dtypes.storage_name_for_array(a))
    }


def load_importance(path: str, model: WeightSource) -> ImportanceMap:
    """Read an importance file and validate it against a model's float tensors."""
    ckpt = open_checkpoint(path)
    expected = _model_float_meta(model)
    scores: dict[str, np.ndarray] = {}
    for name in sorted(expected):
        if name not in ckpt:
            raise ValidationError(f"importance missing for {name}")
        info = ckpt.info(name)
        if info.shape != expected[name]:
            raise ValidationError(
                f"importance shape {list(info.shape)} for {name!r} does not match "
                f"model shape {list(expected[name])}"
            )
        scores[name] = np.asarray(ckpt.read(name, upcast=True), dtype=np.float32)
    extra = sorted(set(ckpt.names()) - set(expected))
    if extra:
        raise ValidationError(f"importance has unexpected tensor {extra[0]!r}")
    validate_scores(scores)
    meta = ckpt.metadata
    return ImportanceMap(
        scores=scores,
        calibration_id=meta.get("calibration_id", ""),
        sample_count=int(meta.get("sample_count", "0") or 0),
        model_id=meta.get("model_id", ""),
    )


def save_importance(path: str, imp: ImportanceMap) -> None:
    validate_scores(imp.scores)
    arrays = {n: np.asarray(v, dtype=np.float32) for n, v in imp.scores.items()}
    write_arrays(
        path,
        arrays,
        metadata={
            "calibration_id": imp.calibration_id,
            "sample_count": str(imp.sample_count),
            "model_id": imp.model_id,
        },
    )
