"""Nuclear-norm diagnostics over per-layer gradient matrices.

Singular values are computed in f64 (values only, no vectors); the contract
is the sum to 1e-8 relative tolerance, the factorization routine is an
implementation detail. A gradient dump may hold per-sample or mean-over-
samples matrices; the report treats every matched 2-D tensor the same way
and leaves that distinction to the dump's metadata.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .concurrency import parallel_map
from .errors import ValidationError
from .task_vectors import WeightSource, read_value
from .store import Checkpoint

PROJECTION_KINDS = ("Q", "K", "V", "O")
DEFAULT_LAYER_PATTERN = "model.layers.{layer}.self_attn.{kind}_proj.weight"

RANK_CUTOFF = 1e-10
BOUND_SLACK = 1e-9


def _as_matrix(matrix: np.ndarray, label: str = "spectral input") -> np.ndarray:
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{label} must be a 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"non-finite value in {label}")
    return arr


def singular_values(matrix: np.ndarray) -> np.ndarray:
    """Descending singular values in f64."""
    return np.linalg.svd(_as_matrix(matrix), compute_uv=False)


def nuclear_norm(matrix: np.ndarray) -> float:
    """Sum of singular values."""
    return float(singular_values(matrix).sum())


def frobenius_norm(matrix: np.ndarray) -> float:
    return float(np.linalg.norm(_as_matrix(matrix)))


def numerical_rank(svals: np.ndarray) -> int:
    """Count of singular values above RANK_CUTOFF relative to the largest."""
    svals = np.asarray(svals, dtype=np.float64)
    if svals.size == 0 or svals[0] == 0.0:
        return 0
    return int(np.count_nonzero(svals > RANK_CUTOFF * svals[0]))


def verify_norm_bounds(matrix: np.ndarray) -> dict:
    """Check fro <= nuc <= sqrt(rank) * fro with relative slack."""
    svals = singular_values(matrix)
    nuc = float(svals.sum())
    fro = float(np.sqrt(np.sum(svals * svals)))
    rank = numerical_rank(svals)
    slack = BOUND_SLACK * max(1.0, nuc)
    return {
        "fro": fro,
        "nuc": nuc,
        "rank": rank,
        "lower_holds": bool(fro <= nuc + slack),
        "upper_holds": bool(nuc <= np.sqrt(rank) * fro + slack),
    }


def mad(series: Sequence[float]) -> float:
    """Mean absolute difference of consecutive values."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"mad needs a 1-D series, got shape {arr.shape}")
    if arr.size < 2:
        raise ValidationError(f"mad needs at least two values, got {arr.size}")
    if not np.isfinite(arr).all():
        raise ValidationError("non-finite value in mad series")
    return float(np.mean(np.abs(np.diff(arr))))


@dataclass(frozen=True)
class SpectralEntry:
    kind: str
    layer: int
    nuclear: float
    frobenius: float
    rank: int
    lower_holds: bool
    upper_holds: bool
    singular_values: tuple[float, ...] | None = None


@dataclass(frozen=True)
class SpectralReport:
    """Per (kind, layer) norms plus a per-kind layer-stability MAD."""

    entries: tuple[SpectralEntry, ...]
    mad_by_kind: Mapping[str, float | None]
    skipped: Mapping[str, str]
    notes: tuple[str, ...]
    model_id: str = ""

    def to_json(self) -> dict:
        rows = []
        for e in self.entries:
            row = {
                "kind": e.kind,
                "layer": e.layer,
                "nuclear": e.nuclear,
                "frobenius": e.frobenius,
                "rank": e.rank,
                "lower_holds": e.lower_holds,
                "upper_holds": e.upper_holds,
            }
            if e.singular_values is not None:
                row["singular_values"] = list(e.singular_values)
            rows.append(row)
        return {
            "model_id": self.model_id,
            "entries": rows,
            "mad": dict(self.mad_by_kind),
            "skipped": dict(self.skipped),
            "notes": list(self.notes),
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["kind", "layer", "nuclear", "frobenius", "rank"])
        for e in self.entries:
            writer.writerow([e.kind, e.layer, repr(e.nuclear), repr(e.frobenius), e.rank])
        return out.getvalue()


def _pattern_regex(pattern: str) -> re.Pattern:
    if "{kind}" not in pattern or "{layer}" not in pattern:
        raise ValidationError(
            f"layer pattern must contain {{kind}} and {{layer}} placeholders, got {pattern!r}"
        )
    escaped = re.escape(pattern)
    escaped = escaped.replace(re.escape("{kind}"), r"(?P<kind>[QKVOqkvo])")
    escaped = escaped.replace(re.escape("{layer}"), r"(?P<layer>\d+)")
    return re.compile("^" + escaped + "$")


def layerwise_spectral_report(
    grads: WeightSource,
    pattern: str = DEFAULT_LAYER_PATTERN,
    *,
    model_id: str = "",
    keep_singular_values: bool = False,
    threads: int = 1,
) -> SpectralReport:
    """Nuclear/Frobenius norms and rank for every matched projection matrix.

    Tensor names are matched against ``pattern`` with {kind} standing for one
    of q/k/v/o (either case) and {layer} for a decimal layer index. Entries
    are ordered by kind (Q, K, V, O), then ascending layer; unmatched tensors
    are listed as skipped.
    """
    regex = _pattern_regex(pattern)
    names = list(grads.names()) if isinstance(grads, Checkpoint) else sorted(grads)
    matched: list[tuple[str, int, str]] = []
    skipped: dict[str, str] = {}
    for name in names:
        m = regex.match(name)
        if m is None:
            skipped[name] = "does not match pattern"
            continue
        matched.append((m.group("kind").upper(), int(m.group("layer")), name))
    if not matched:
        raise ValidationError(f"no projection matrices matched pattern {pattern!r}")

    kind_order = {k: i for i, k in enumerate(PROJECTION_KINDS)}
    matched.sort(key=lambda t: (kind_order[t[0]], t[1]))

    def one(item: tuple[str, int, str]) -> SpectralEntry:
        kind, layer, name = item
        value = read_value(grads, name)
        if value.ndim != 2:
            raise ValidationError(
                f"tensor {name} matches the pattern but is not 2-D (shape {value.shape})"
            )
        svals = np.linalg.svd(_as_matrix(value, label=f"tensor {name}"), compute_uv=False)
        nuc = float(svals.sum())
        fro = float(np.sqrt(np.sum(svals * svals)))
        rank = numerical_rank(svals)
        slack = BOUND_SLACK * max(1.0, nuc)
        return SpectralEntry(
            kind=kind,
            layer=layer,
            nuclear=nuc,
            frobenius=fro,
            rank=rank,
            lower_holds=bool(fro <= nuc + slack),
            upper_holds=bool(nuc <= np.sqrt(rank) * fro + slack),
            singular_values=tuple(float(s) for s in svals) if keep_singular_values else None,
        )

    entries = tuple(parallel_map(one, matched, threads))

    notes: list[str] = []
    mad_by_kind: dict[str, float | None] = {}
    for kind in PROJECTION_KINDS:
        series = [e.nuclear for e in entries if e.kind == kind]
        if not series:
            notes.append(f"no tensors matched kind {kind}")
        elif len(series) < 2:
            mad_by_kind[kind] = None
            notes.append(f"kind {kind} has a single layer; MAD undefined")
        else:
            mad_by_kind[kind] = mad(series)
    return SpectralReport(
        entries=entries,
        mad_by_kind=mad_by_kind,
        skipped=skipped,
        notes=tuple(notes),
        model_id=model_id,
    )
