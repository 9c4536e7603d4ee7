"""Desk-scale gradient oracle: a tiny dense network with manual backprop.

This is the stand-in for a real model so the whole pipeline (importance,
selection, merging, experiments) is testable without any external ML stack.
Everything runs in f64; activations are tanh or identity and losses are MSE
or softmax cross-entropy, which keeps backprop hand-verifiable while still
exercising every property downstream.

Tensor naming: layers.{i}.weight / layers.{i}.bias, matching the checkpoint
exports of the trained models this package merges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

ACT_TANH = "tanh"
ACT_IDENTITY = "identity"
LOSS_MSE = "mse"
LOSS_CROSS_ENTROPY = "cross_entropy"

# Final trained weights snap to this grid so that f64 delta arithmetic on
# them (subtract, scale by dyadic λ, re-add) is exact, making reconstruction
# identities bitwise instead of approximately true.
WEIGHT_GRID = 2.0**-24


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: np.ndarray  # target vector (mse) or 0-d integer class index (cross_entropy)


@dataclass(frozen=True)
class CalibrationSet:
    samples: tuple[Sample, ...]
    id: str

    def __post_init__(self):
        if not self.samples:
            raise ValidationError("calibration set is empty")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class ToyModel:
    weights: tuple[np.ndarray, ...]   # layer l: (d_l, d_{l-1})
    biases: tuple[np.ndarray, ...]    # layer l: (d_l,)
    activations: tuple[str, ...]
    loss: str

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValidationError("layer count mismatch between weights, biases, activations")
        if not self.weights:
            raise ValidationError("model has no layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValidationError(f"layer {i} weight/bias shapes do not chain")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValidationError(f"layer {i} input dim does not chain with layer {i - 1}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValidationError(f"layer {i} has non-finite parameters")
        for act in self.activations:
            if act not in (ACT_TANH, ACT_IDENTITY):
                raise ValidationError(f"unknown activation {act!r}")
        if self.loss not in (LOSS_MSE, LOSS_CROSS_ENTROPY):
            raise ValidationError(f"unknown loss {self.loss!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def to_weight_map(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layers.{i}.weight"] = w
            out[f"layers.{i}.bias"] = b
        return out

    def with_weight_map(self, arrays: Mapping[str, np.ndarray]) -> "ToyModel":
        weights = []
        biases = []
        for i in range(len(self.weights)):
            weights.append(np.asarray(arrays[f"layers.{i}.weight"], dtype=np.float64))
            biases.append(np.asarray(arrays[f"layers.{i}.bias"], dtype=np.float64))
        return ToyModel(
            weights=tuple(weights),
            biases=tuple(biases),
            activations=self.activations,
            loss=self.loss,
        )


def _check_sample(model: ToyModel, sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(sample.x, dtype=np.float64)
    if x.shape != (model.in_dim,):
        raise ValidationError(
            f"sample input shape {list(x.shape)} does not match model input dim {model.in_dim}"
        )
    if model.loss == LOSS_MSE:
        y = np.asarray(sample.y, dtype=np.float64)
        if y.shape != (model.out_dim,):
            raise ValidationError(
                f"sample target shape {list(y.shape)} does not match model output dim {model.out_dim}"
            )
    else:
        y = np.asarray(sample.y)
        if y.shape != () or not np.issubdtype(y.dtype, np.integer):
            raise ValidationError("cross-entropy target must be a scalar class index")
        if not 0 <= int(y) < model.out_dim:
            raise ValidationError(f"class index {int(y)} outside [0, {model.out_dim})")
    return x, y


def _forward(model: ToyModel, x: np.ndarray) -> list[np.ndarray]:
    """Activations per layer, input included: [a_0, a_1, ..., a_L]."""
    acts = [x]
    a = x
    for w, b, kind in zip(model.weights, model.biases, model.activations):
        z = w @ a + b
        a = np.tanh(z) if kind == ACT_TANH else z
        acts.append(a)
    return acts


def _softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def toy_forward_loss(model: ToyModel, sample: Sample) -> float:
    x, y = _check_sample(model, sample)
    out = _forward(model, x)[-1]
    if model.loss == LOSS_MSE:
        diff = out - y
        return float(np.mean(diff * diff))
    p = _softmax(out)
    return float(-np.log(p[int(y)]))


def toy_backward(model: ToyModel, sample: Sample) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of toy_forward_loss for every parameter."""
    x, y = _check_sample(model, sample)
    acts = _forward(model, x)
    out = acts[-1]
    if model.loss == LOSS_MSE:
        g_a = 2.0 * (out - y) / out.size
    else:
        g_a = _softmax(out)
        g_a[int(y)] -= 1.0

    grads: dict[str, np.ndarray] = {}
    for l in range(len(model.weights) - 1, -1, -1):
        a_out = acts[l + 1]
        a_in = acts[l]
        if model.activations[l] == ACT_TANH:
            g_z = g_a * (1.0 - a_out * a_out)
        else:
            g_z = g_a
        grads[f"layers.{l}.weight"] = np.outer(g_z, a_in)
        grads[f"layers.{l}.bias"] = g_z.copy()
        if l > 0:
            g_a = model.weights[l].T @ g_z
    return grads


def finite_diff_gradient(model: ToyModel, sample: Sample, eps: float) -> dict[str, np.ndarray]:
    """Central differences (L(θ+eps·e_i) - L(θ-eps·e_i)) / (2·eps), f64."""
    if eps <= 0:
        raise ValidationError("finite-difference step must be positive")
    arrays = model.to_weight_map()
    grads: dict[str, np.ndarray] = {}
    for name in sorted(arrays):
        work = {n: np.array(a, dtype=np.float64, copy=True) for n, a in arrays.items()}
        grad = np.zeros(arrays[name].shape, dtype=np.float64)
        flat = work[name].ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = toy_forward_loss(model.with_weight_map(work), sample)
            flat[i] = keep - eps
            lo = toy_forward_loss(model.with_weight_map(work), sample)
            flat[i] = keep
            grad.ravel()[i] = (hi - lo) / (2.0 * eps)
        grads[name] = grad
    return grads


def toy_importance(model: ToyModel, calib: CalibrationSet):
    """Mean |gradient| over the calibration set, at the supplied parameters.

    Algorithm-faithful detail: gradients are evaluated at the fine-tuned
    model handed in, never at the base model.
    """
    from .importance import average_abs_gradients

    grads = [toy_backward(model, s) for s in calib.samples]
    return average_abs_gradients(grads, calibration_id=calib.id, model_id="toy")


def snap_to_grid(arr: np.ndarray, grid: float = WEIGHT_GRID) -> np.ndarray:
    return np.round(np.asarray(arr, dtype=np.float64) / grid) * grid


def random_toy_model(
    rng: np.random.Generator,
    dims: Sequence[int],
    loss: str = LOSS_MSE,
    hidden_activation: str = ACT_TANH,
    scale: float = 0.8,
    snap: bool = True,
) -> ToyModel:
    """Random chained-dimension model; weights optionally on the exact grid."""
    weights = []
    biases = []
    n_layers = len(dims) - 1
    for l in range(n_layers):
        w = rng.normal(scale=scale / np.sqrt(dims[l]), size=(dims[l + 1], dims[l]))
        b = rng.normal(scale=0.1, size=dims[l + 1])
        if snap:
            w, b = snap_to_grid(w), snap_to_grid(b)
        weights.append(w)
        biases.append(b)
    activations = [ACT_TANH] * (n_layers - 1) + [ACT_IDENTITY]
    if hidden_activation == ACT_IDENTITY:
        activations = [ACT_IDENTITY] * n_layers
    return ToyModel(
        weights=tuple(weights),
        biases=tuple(biases),
        activations=tuple(activations),
        loss=loss,
    )


def random_calibration(
    rng: np.random.Generator,
    model: ToyModel,
    count: int,
    id: str = "calib",
) -> CalibrationSet:
    samples = []
    for _ in range(count):
        x = rng.normal(size=model.in_dim)
        if model.loss == LOSS_MSE:
            y = rng.normal(size=model.out_dim)
        else:
            y = np.int64(rng.integers(0, model.out_dim))
        samples.append(Sample(x=x, y=y))
    return CalibrationSet(samples=tuple(samples), id=id)
