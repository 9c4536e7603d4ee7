"""File formats for toy models and calibration sets.

A toy model rides in a regular checkpoint: layers.{i}.weight / layers.{i}.bias
tensors in f64 plus metadata recording the activation chain and loss kind, so
a trained toy model is simultaneously a merge input and a gradient oracle.
Calibration sets are JSON documents, small enough that readability wins.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import IoError, ValidationError
from .recipes import load_json_object
from .store import Checkpoint, TensorEntry, open_checkpoint, write_checkpoint
from .toy import CalibrationSet, Sample, ToyModel

META_ACTIVATIONS = "toy_activations"
META_LOSS = "toy_loss"


def save_toy_model(path: str, model: ToyModel) -> None:
    entries = {
        name: TensorEntry(dtype="F64", data=np.asarray(arr, dtype=np.float64))
        for name, arr in model.to_weight_map().items()
    }
    metadata = {
        META_ACTIVATIONS: ",".join(model.activations),
        META_LOSS: model.loss,
    }
    write_checkpoint(path, entries, metadata=metadata)


def load_toy_model(source: str | Checkpoint) -> ToyModel:
    ckpt = open_checkpoint(source) if isinstance(source, str) else source
    for key in (META_ACTIVATIONS, META_LOSS):
        if key not in ckpt.metadata:
            raise ValidationError(
                f"not a toy-model checkpoint: metadata key {key!r} missing"
            )
    activations = tuple(ckpt.metadata[META_ACTIVATIONS].split(","))
    expected = set()
    for i in range(len(activations)):
        expected.add(f"layers.{i}.weight")
        expected.add(f"layers.{i}.bias")
    actual = set(ckpt.names())
    missing = sorted(expected - actual)
    if missing:
        raise ValidationError(f"toy model is missing tensor {missing[0]!r}")
    extra = sorted(actual - expected)
    if extra:
        raise ValidationError(f"unexpected tensor {extra[0]!r} in toy model")
    weights = []
    biases = []
    for i in range(len(activations)):
        weights.append(np.asarray(ckpt.read(f"layers.{i}.weight"), dtype=np.float64))
        biases.append(np.asarray(ckpt.read(f"layers.{i}.bias"), dtype=np.float64))
    return ToyModel(
        weights=tuple(weights),
        biases=tuple(biases),
        activations=activations,
        loss=ckpt.metadata[META_LOSS],
    )


def _sample_to_json(sample: Sample) -> dict:
    y = np.asarray(sample.y)
    if y.shape == () and np.issubdtype(y.dtype, np.integer):
        target: object = int(y)
    else:
        target = [float(v) for v in np.asarray(y, dtype=np.float64)]
    return {"x": [float(v) for v in np.asarray(sample.x, dtype=np.float64)], "y": target}


def save_calibration(path: str, calib: CalibrationSet) -> None:
    doc = {"id": calib.id, "samples": [_sample_to_json(s) for s in calib.samples]}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def _vector(label: str, value: object) -> np.ndarray:
    if not isinstance(value, list):
        raise ValidationError(f"calibration {label} must be an array of numbers")
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ValidationError(f"calibration {label} must be an array of numbers")
    return np.asarray(value, dtype=np.float64)


def load_calibration(path: str) -> CalibrationSet:
    doc = load_json_object(path, "calibration")
    for key in doc:
        if key not in ("id", "samples"):
            raise ValidationError(f"unknown calibration key {key!r}")
    set_id = doc.get("id", "")
    if not isinstance(set_id, str):
        raise ValidationError("calibration key 'id' must be a string")
    raw_samples = doc.get("samples")
    if not isinstance(raw_samples, list):
        raise ValidationError("calibration key 'samples' must be an array")
    samples = []
    for i, entry in enumerate(raw_samples):
        if not isinstance(entry, dict):
            raise ValidationError(f"calibration sample {i} is not an object")
        for key in entry:
            if key not in ("x", "y"):
                raise ValidationError(f"unknown calibration sample key {key!r}")
        if "x" not in entry or "y" not in entry:
            raise ValidationError(f"calibration sample {i} needs both 'x' and 'y'")
        x = _vector(f"sample {i} x", entry["x"])
        target = entry["y"]
        if isinstance(target, bool):
            raise ValidationError(f"calibration sample {i} y must be a class index or vector")
        if isinstance(target, int):
            y: np.ndarray = np.int64(target)
        else:
            y = _vector(f"sample {i} y", target)
        samples.append(Sample(x=x, y=y))
    return CalibrationSet(samples=tuple(samples), id=set_id)


def first_samples(calib: CalibrationSet, cap: int) -> CalibrationSet:
    """The leading ``cap`` samples; calibration runs use a fixed-size prefix."""
    if cap < 1:
        raise ValidationError(f"sample cap must be a positive integer, got {cap}")
    if cap >= len(calib.samples):
        return calib
    return CalibrationSet(samples=calib.samples[:cap], id=calib.id)


def model_label(path: str) -> str:
    return os.path.basename(path)
