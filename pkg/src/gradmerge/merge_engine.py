"""Weight-space merge operators.

Every operator is a pure in-memory function over weight sources (open
checkpoints or plain name-to-array mappings) returning a MergeOutcome: the
merged arrays, the flat indices that were actually updated, and a report.
File orchestration (recipes, splice-writing, report serialization) lives in
workflows; nothing here touches the filesystem.

Determinism: per-tensor work may run on a thread pool, but results are
assembled in canonical order and stochastic draws are keyed by
(seed, lane, name, index), so outputs are bitwise independent of thread
count and iteration order. Updates skip positions whose scaled contribution
is exactly zero, so a zero scale or an all-overlap selection reproduces the
base checkpoint bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .compat import validate_compatibility
from .concurrency import parallel_map
from .errors import ConsistencyError, ValidationError
from .importance import ImportanceMap
from .keyed_rng import drop_mask
from .selection import (
    SCOPE_GLOBAL,
    ZERO_INCLUDE,
    exclude,
    intersection_count,
    round_half_up,
    select_bottomk,
    select_topk,
)
from .store import Checkpoint
from .task_vectors import (
    TaskVector,
    WeightSource,
    compute_task_vector,
    masked_contribution,
    read_value,
    working_dtype,
)

METHOD_REASON_ANY = "reason-any"
METHOD_LINEAR = "linear"
METHOD_TASK_ARITHMETIC = "task-arithmetic"
METHOD_TIES = "ties"
METHOD_DARE = "dare"
METHOD_INJECT = "inject"

SELECT_TOP = "top"
SELECT_BOTTOM = "bottom"


@dataclass(frozen=True)
class MergeReport:
    """What a merge did: counts, provenance, and resolved parameters."""

    method: str
    updated_params: int
    selection: Mapping[str, int] | None
    skipped: Mapping[str, str]
    warnings: tuple[str, ...]
    timing_seconds: float
    params: Mapping[str, object]

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "updated_params": self.updated_params,
            "selection": dict(self.selection) if self.selection is not None else None,
            "skipped": dict(self.skipped),
            "warnings": list(self.warnings),
            "timing_seconds": self.timing_seconds,
            "params": dict(self.params),
        }


@dataclass(frozen=True)
class MergeOutcome:
    """Merged tensors plus exactly which flat positions changed.

    ``touched`` holds, per eligible tensor, the sorted flat indices whose
    values were updated; everything else carries base bits. ``replace_all``
    marks methods with no base to splice against (linear), where the whole
    output is freshly computed. The contrastive merge also hands back the
    post-exclusion masks it applied so callers can audit disjointness.
    """

    arrays: dict[str, np.ndarray]
    touched: dict[str, np.ndarray]
    replace_all: bool
    report: MergeReport
    task_mask: object | None = None
    reasoning_mask: object | None = None


def _source_names(source: WeightSource) -> list[str]:
    if isinstance(source, Checkpoint):
        return list(source.names())
    return sorted(source)


def _check_finite_scale(value: float, label: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{label} must be finite, got {value}")
    return value


def _restrict_importance(imp: ImportanceMap, tv: TaskVector) -> ImportanceMap:
    """Importance over exactly the eligible tensors, shape-checked."""
    scores = {}
    for name in tv.names:
        if name not in imp.scores:
            raise ValidationError(f"importance missing for {name}")
        s = imp.scores[name]
        d = tv.deltas[name]
        if tuple(s.shape) != tuple(d.shape):
            raise ValidationError(
                f"importance shape mismatch for {name}: "
                f"scores {tuple(s.shape)}, model {tuple(d.shape)}"
            )
        scores[name] = s
    return ImportanceMap(
        scores=scores,
        calibration_id=imp.calibration_id,
        sample_count=imp.sample_count,
        model_id=imp.model_id,
    )


def _assemble(
    base: WeightSource,
    shared: Sequence[str],
    update_fn: Callable[[str, np.ndarray], tuple[np.ndarray, np.ndarray]],
    threads: int,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Run update_fn over eligible tensors, copy the rest from base."""
    shared_set = set(shared)

    def one(name: str):
        if name in shared_set:
            arr, touched = update_fn(name, read_value(base, name))
            return name, arr, touched
        return name, np.array(read_value(base, name, upcast=False), copy=True), None

    arrays: dict[str, np.ndarray] = {}
    touched: dict[str, np.ndarray] = {}
    for name, arr, hit in parallel_map(one, _source_names(base), threads):
        arrays[name] = arr
        if hit is not None:
            touched[name] = hit
    return arrays, touched


def _apply_combined(
    value: np.ndarray, wd: np.dtype, combined: np.ndarray, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """base + lam * combined, updating only positions with nonzero contribution."""
    flat = np.array(value, dtype=wd, copy=True).ravel()
    contrib = combined * wd.type(lam)
    nz = np.flatnonzero(contrib)
    flat[nz] += contrib[nz]
    return flat.reshape(value.shape), nz


def _require_nonempty(compat) -> None:
    if not compat.shared:
        raise ConsistencyError(
            "empty eligible set: the inputs share no float tensors after filtering"
        )


def reason_any_merge(
    base: WeightSource,
    task: WeightSource,
    reasoning: WeightSource,
    task_importance: ImportanceMap,
    reasoning_importance: ImportanceMap,
    *,
    p_t: float = 0.05,
    p_r: float = 0.05,
    lambda_t: float = 1.0,
    lambda_r: float = 1.0,
    scope: str = SCOPE_GLOBAL,
    zero_policy: str = ZERO_INCLUDE,
    include_patterns: Sequence[str] | None = None,
    exclude_patterns: Sequence[str] | None = None,
    threads: int = 1,
) -> MergeOutcome:
    """Contrastive-gradient merge of a task model and a reasoning model.

    Selects the top p_t fraction of the task model by gradient importance and
    the bottom p_r fraction of the reasoning model, drops the overlap from
    both sides, and adds the surviving scaled deltas to the base. Disjoint
    masks mean the two updates never collide on a parameter.
    """
    start = time.perf_counter()
    lambda_t = _check_finite_scale(lambda_t, "lambda_t")
    lambda_r = _check_finite_scale(lambda_r, "lambda_r")
    compat = validate_compatibility(
        [base, task, reasoning],
        include_patterns=include_patterns,
        exclude_patterns=exclude_patterns,
        labels=("base", "task", "reasoning"),
    )
    _require_nonempty(compat)
    tv_t = compute_task_vector(task, base, compat)
    tv_r = compute_task_vector(reasoning, base, compat)
    imp_t = _restrict_importance(task_importance, tv_t)
    imp_r = _restrict_importance(reasoning_importance, tv_r)

    n_t = select_topk(imp_t, p_t, scope=scope)
    n_r = select_bottomk(imp_r, p_r, scope=scope, zero_policy=zero_policy)
    overlap = intersection_count(n_t, n_r)
    m_t, m_r = exclude(n_t, n_r)

    warnings: list[str] = []
    if n_t.cardinality > 0 and m_t.cardinality == 0:
        warnings.append(
            f"task mask is empty after exclusion (all {n_t.cardinality} selected parameters overlapped)"
        )
    if n_r.cardinality > 0 and m_r.cardinality == 0:
        warnings.append(
            f"reasoning mask is empty after exclusion (all {n_r.cardinality} selected parameters overlapped)"
        )

    def update(name: str, value: np.ndarray):
        d_t = tv_t.deltas[name]
        d_r = tv_r.deltas[name]
        wd = working_dtype(value, d_t, d_r)
        flat = np.array(value, dtype=wd, copy=True).ravel()
        sel_t, vals_t = masked_contribution(d_t, m_t.bools(name), lambda_t, wd)
        sel_r, vals_r = masked_contribution(d_r, m_r.bools(name), lambda_r, wd)
        flat[sel_t] += vals_t
        flat[sel_r] += vals_r
        return flat.reshape(value.shape), np.flatnonzero(sel_t | sel_r)

    arrays, touched = _assemble(base, compat.shared, update, threads)
    report = MergeReport(
        method=METHOD_REASON_ANY,
        updated_params=sum(t.size for t in touched.values()),
        selection={
            "task_selected": n_t.cardinality,
            "reasoning_selected": n_r.cardinality,
            "overlap": overlap,
            "task_applied": m_t.cardinality,
            "reasoning_applied": m_r.cardinality,
            "eligible_params": compat.eligible_param_count,
        },
        skipped=dict(compat.skipped),
        warnings=tuple(warnings),
        timing_seconds=time.perf_counter() - start,
        params={
            "p_t": p_t,
            "p_r": p_r,
            "lambda_t": lambda_t,
            "lambda_r": lambda_r,
            "scope": scope,
            "zero_policy": zero_policy,
        },
    )
    return MergeOutcome(
        arrays=arrays,
        touched=touched,
        replace_all=False,
        report=report,
        task_mask=m_t,
        reasoning_mask=m_r,
    )


def linear_merge(
    models: Sequence[WeightSource],
    weights: Sequence[float],
    *,
    threads: int = 1,
) -> MergeOutcome:
    """Convex combination of models sharing an identical tensor structure.

    There is no base checkpoint: every float tensor is recomputed as the
    weighted sum, and non-float tensors must agree bitwise across inputs.
    """
    start = time.perf_counter()
    if len(models) < 2:
        raise ValidationError("linear merge needs at least two models")
    if len(weights) != len(models):
        raise ValidationError(
            f"got {len(models)} models but {len(weights)} weights"
        )
    weights = [_check_finite_scale(w, "linear weight") for w in weights]
    total = math.fsum(weights)
    if abs(total - 1.0) > 1e-9:
        raise ValidationError(f"linear weights must sum to 1, got {total!r}")

    names = _source_names(models[0])
    ref = set(names)
    for i, model in enumerate(models[1:], start=1):
        cur = set(_source_names(model))
        if cur != ref:
            missing = sorted(ref - cur)
            extra = sorted(cur - ref)
            detail = []
            if missing:
                detail.append(f"missing {missing[:3]}")
            if extra:
                detail.append(f"extra {extra[:3]}")
            raise ConsistencyError(
                f"tensor sets differ: model {i} has " + " and ".join(detail)
            )

    def one(name: str):
        values = [read_value(m, name) for m in models]
        shapes = {v.shape for v in values}
        if len(shapes) > 1:
            raise ConsistencyError(
                f"shape mismatch for {name!r}: " + ", ".join(
                    f"model {i} has {v.shape}" for i, v in enumerate(values)
                )
            )
        if any(v.dtype.kind != "f" for v in values):
            first = np.array(read_value(models[0], name, upcast=False), copy=True)
            for i, m in enumerate(models[1:], start=1):
                other = read_value(m, name, upcast=False)
                if first.dtype != other.dtype or not np.array_equal(first, other):
                    raise ConsistencyError(
                        f"non-float tensor {name!r} differs across models; "
                        "cannot combine it linearly"
                    )
            return name, first, None
        wd = working_dtype(*values)
        acc = None
        for w, v in zip(weights, values):
            if w == 0.0:
                continue
            term = v.astype(wd, copy=False) * wd.type(w)
            acc = term if acc is None else acc + term
        return name, acc, values[0].size

    arrays: dict[str, np.ndarray] = {}
    updated = 0
    for name, arr, count in parallel_map(one, names, threads):
        arrays[name] = arr
        if count is not None:
            updated += count
    report = MergeReport(
        method=METHOD_LINEAR,
        updated_params=updated,
        selection=None,
        skipped={},
        warnings=(),
        timing_seconds=time.perf_counter() - start,
        params={"weights": list(weights)},
    )
    return MergeOutcome(arrays=arrays, touched={}, replace_all=True, report=report)


def _additive_baseline(
    base: WeightSource,
    fines: Sequence[WeightSource],
    lam: float,
    method: str,
    params: dict,
    combined_fn: Callable[[str, np.ndarray, list[np.ndarray], np.dtype], np.ndarray],
    include_patterns: Sequence[str] | None,
    exclude_patterns: Sequence[str] | None,
    threads: int,
    start: float,
) -> MergeOutcome:
    """Shared skeleton: base + lam * combined(deltas), skipping zero terms."""
    if not fines:
        raise ValidationError(f"{method} merge needs at least one fine-tuned model")
    labels = ("base",) + tuple(f"model {i}" for i in range(1, len(fines) + 1))
    compat = validate_compatibility(
        [base, *fines],
        include_patterns=include_patterns,
        exclude_patterns=exclude_patterns,
        labels=labels,
    )
    _require_nonempty(compat)
    tvs = [compute_task_vector(f, base, compat) for f in fines]

    def update(name: str, value: np.ndarray):
        deltas = [tv.deltas[name] for tv in tvs]
        wd = working_dtype(value, *deltas)
        flats = [d.astype(wd, copy=False).ravel() for d in deltas]
        combined = combined_fn(name, value, flats, wd)
        return _apply_combined(value, wd, combined, lam)

    arrays, touched = _assemble(base, compat.shared, update, threads)
    report = MergeReport(
        method=method,
        updated_params=sum(t.size for t in touched.values()),
        selection=None,
        skipped=dict(compat.skipped),
        warnings=(),
        timing_seconds=time.perf_counter() - start,
        params=params,
    )
    return MergeOutcome(arrays=arrays, touched=touched, replace_all=False, report=report)


def task_arithmetic_merge(
    base: WeightSource,
    fines: Sequence[WeightSource],
    lam: float = 0.3,
    *,
    include_patterns: Sequence[str] | None = None,
    exclude_patterns: Sequence[str] | None = None,
    threads: int = 1,
) -> MergeOutcome:
    """base + lam * sum of task vectors."""
    start = time.perf_counter()
    lam = _check_finite_scale(lam, "scaling factor")

    def combined(name, value, flats, wd):
        acc = flats[0]
        for f in flats[1:]:
            acc = acc + f
        return acc

    return _additive_baseline(
        base, fines, lam, METHOD_TASK_ARITHMETIC, {"lambda": lam},
        combined, include_patterns, exclude_patterns, threads, start,
    )


def ties_merge(
    base: WeightSource,
    fines: Sequence[WeightSource],
    lam: float = 0.3,
    density: float = 0.1,
    *,
    include_patterns: Sequence[str] | None = None,
    exclude_patterns: Sequence[str] | None = None,
    threads: int = 1,
) -> MergeOutcome:
    """Trim each task vector per tensor, elect a sign, average the agreeing values.

    Trimming keeps the round(density * d) largest-magnitude entries of each
    tensor, ties broken toward the earlier flat index. The elected sign per
    coordinate is the one with the larger summed magnitude (ties go positive);
    the merged delta is the mean of the trimmed values that agree with it.
    """
    start = time.perf_counter()
    lam = _check_finite_scale(lam, "scaling factor")
    density = float(density)
    if not (0.0 < density <= 1.0):
        raise ValidationError(f"density must be in (0, 1], got {density}")

    def combined(name, value, flats, wd):
        d_size = flats[0].size
        k = min(round_half_up(density * d_size), d_size)
        trimmed = []
        for flat in flats:
            t = np.zeros(d_size, dtype=wd)
            if k > 0:
                order = np.argsort(-np.abs(flat), kind="stable")
                top = order[:k]
                t[top] = flat[top]
            trimmed.append(t)
        pos = np.zeros(d_size, dtype=np.float64)
        neg = np.zeros(d_size, dtype=np.float64)
        for t in trimmed:
            t64 = t.astype(np.float64, copy=False)
            pos += np.maximum(t64, 0.0)
            neg += np.maximum(-t64, 0.0)
        elect_positive = pos >= neg
        count = np.zeros(d_size, dtype=np.int64)
        total = np.zeros(d_size, dtype=wd)
        for t in trimmed:
            agree = np.where(elect_positive, t > 0, t < 0)
            count += agree
            total = total + np.where(agree, t, wd.type(0))
        merged = np.zeros(d_size, dtype=wd)
        nz = count > 0
        merged[nz] = total[nz] / count[nz].astype(wd)
        return merged

    return _additive_baseline(
        base, fines, lam, METHOD_TIES, {"lambda": lam, "density": density},
        combined, include_patterns, exclude_patterns, threads, start,
    )


def dare_merge(
    base: WeightSource,
    fines: Sequence[WeightSource],
    lam: float = 0.3,
    drop_rate: float = 0.9,
    seed: int = 0,
    *,
    include_patterns: Sequence[str] | None = None,
    exclude_patterns: Sequence[str] | None = None,
    threads: int = 1,
) -> MergeOutcome:
    """Randomly drop delta elements, rescale survivors by 1/(1-drop_rate).

    Drops are keyed by (seed, task-vector ordinal, tensor name, flat index),
    so the same recipe and seed always reproduce the same output bit for bit,
    at any thread count. The ordinal keeps the two task vectors' drop
    patterns independent of each other.
    """
    start = time.perf_counter()
    lam = _check_finite_scale(lam, "scaling factor")
    drop_rate = float(drop_rate)
    if not (0.0 <= drop_rate < 1.0):
        raise ValidationError(f"drop rate must be in [0, 1), got {drop_rate}")
    seed = int(seed)
    if not (0 <= seed < 2**64):
        raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    factor = 1.0 / (1.0 - drop_rate)

    def combined(name, value, flats, wd):
        acc = None
        for lane, flat in enumerate(flats):
            kept = ~drop_mask(seed, name, flat.size, drop_rate, lane=lane)
            processed = np.zeros(flat.size, dtype=wd)
            processed[kept] = flat[kept] * wd.type(factor)
            acc = processed if acc is None else acc + processed
        return acc

    return _additive_baseline(
        base, fines, lam, METHOD_DARE,
        {"lambda": lam, "drop_rate": drop_rate, "seed": seed},
        combined, include_patterns, exclude_patterns, threads, start,
    )


def additive_inject(
    base: WeightSource,
    donor: WeightSource,
    importance: ImportanceMap,
    p: float,
    *,
    select: str = SELECT_BOTTOM,
    lam: float = 1.0,
    scope: str = SCOPE_GLOBAL,
    zero_policy: str = ZERO_INCLUDE,
    include_patterns: Sequence[str] | None = None,
    exclude_patterns: Sequence[str] | None = None,
    threads: int = 1,
) -> MergeOutcome:
    """Add the donor's masked delta to the base: one-sided merge, no exclusion."""
    start = time.perf_counter()
    lam = _check_finite_scale(lam, "scaling factor")
    if select not in (SELECT_TOP, SELECT_BOTTOM):
        raise ValidationError(
            f"select must be {SELECT_TOP!r} or {SELECT_BOTTOM!r}, got {select!r}"
        )
    compat = validate_compatibility(
        [base, donor],
        include_patterns=include_patterns,
        exclude_patterns=exclude_patterns,
        labels=("base", "donor"),
    )
    _require_nonempty(compat)
    tv = compute_task_vector(donor, base, compat)
    imp = _restrict_importance(importance, tv)
    if select == SELECT_TOP:
        mask = select_topk(imp, p, scope=scope)
    else:
        mask = select_bottomk(imp, p, scope=scope, zero_policy=zero_policy)

    def update(name: str, value: np.ndarray):
        delta = tv.deltas[name]
        wd = working_dtype(value, delta)
        flat = np.array(value, dtype=wd, copy=True).ravel()
        sel, vals = masked_contribution(delta, mask.bools(name), lam, wd)
        flat[sel] += vals
        return flat.reshape(value.shape), np.flatnonzero(sel)

    arrays, touched = _assemble(base, compat.shared, update, threads)
    report = MergeReport(
        method=METHOD_INJECT,
        updated_params=sum(t.size for t in touched.values()),
        selection={
            "selected": mask.cardinality,
            "eligible_params": compat.eligible_param_count,
        },
        skipped=dict(compat.skipped),
        warnings=(),
        timing_seconds=time.perf_counter() - start,
        params={
            "p": p,
            "select": select,
            "lambda": lam,
            "scope": scope,
            "zero_policy": zero_policy,
        },
    )
    return MergeOutcome(arrays=arrays, touched=touched, replace_all=False, report=report)
