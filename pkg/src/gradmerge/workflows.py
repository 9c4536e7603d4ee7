"""File-level orchestration: recipes and flags in, checkpoints and reports out.

Each operation here is the single implementation behind one CLI subcommand
and one service route. Operations log their fully-resolved configuration
before acting, write every declared output through a stager (all outputs
appear atomically or not at all), and return a JSON-ready result document.

Output dtype policy: "keep" preserves each tensor's on-disk dtype, splicing
only the updated elements over the base tensor's raw payload so untouched
parameters stay bit-identical; "f32" rewrites every float tensor as f32.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from typing import Mapping, Sequence

import numpy as np

from . import dtypes
from .concurrency import resolve_threads
from .errors import IoError, ValidationError
from .experiments import (
    config_echo,
    config_from_json,
    run_additive_experiment,
    run_merge_comparison,
)
from .importance import ImportanceMap, load_importance, save_importance
from .merge_engine import (
    METHOD_DARE,
    METHOD_LINEAR,
    METHOD_REASON_ANY,
    METHOD_TASK_ARITHMETIC,
    METHOD_TIES,
    SELECT_BOTTOM,
    SELECT_TOP,
    MergeOutcome,
    additive_inject,
    dare_merge,
    linear_merge,
    reason_any_merge,
    task_arithmetic_merge,
    ties_merge,
)
from .recipes import (
    DEFAULT_SAMPLE_CAP,
    DTYPE_F32,
    DTYPE_KEEP,
    MergeRecipe,
    load_json_object,
    parse_recipe,
)
from .selection import SCOPE_GLOBAL, ZERO_INCLUDE
from .spectral import DEFAULT_LAYER_PATTERN, layerwise_spectral_report
from .store import Checkpoint, TensorEntry, open_checkpoint, write_checkpoint
from .toy import toy_importance
from .toy_io import first_samples, load_calibration, load_toy_model, model_label

logger = logging.getLogger("gradmerge")

DIRECTION_TO_SELECT = {"highest": SELECT_TOP, "lowest": SELECT_BOTTOM}

EXPERIMENT_KINDS = ("additive", "comparison", "both")


class OutputStager:
    """Collects outputs as temp files, then renames all of them or none.

    A failure after some outputs are written must not leave partial results
    behind, so every writer targets a staged path and the rename happens only
    once everything succeeded.
    """

    def __init__(self):
        self._staged: list[tuple[str, str]] = []

    def stage(self, final_path: str) -> str:
        tmp = final_path + ".partial"
        self._staged.append((tmp, final_path))
        return tmp

    def commit(self) -> None:
        for tmp, final in self._staged:
            try:
                os.replace(tmp, final)
            except OSError as exc:
                raise IoError(f"cannot write {final}: {exc}") from None

    def abort(self) -> None:
        for tmp, _ in self._staged:
            try:
                os.unlink(tmp)
            except OSError:
                pass


def write_json_doc(path: str, doc: object) -> None:
    text = json.dumps(doc, indent=1) + "\n"
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def write_text(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def _log_config(op: str, config: Mapping[str, object]) -> None:
    logger.info("%s config: %s", op, json.dumps(config, sort_keys=True))


def load_importance_source(source: object, model) -> ImportanceMap:
    """Importance from a checkpoint path or an inline toy-oracle config."""
    if isinstance(source, str):
        return load_importance(source, model)
    if not isinstance(source, Mapping):
        raise ValidationError(
            "importance source must be a file path or a toy-oracle config object"
        )
    toy = load_toy_model(source["toy_model"])
    calib = load_calibration(source["calibration"])
    calib = first_samples(calib, int(source.get("samples", DEFAULT_SAMPLE_CAP)))
    imp = toy_importance(toy, calib)
    return dataclasses.replace(imp, model_id=model_label(source["toy_model"]))


def _reference_dtype(reference, name: str) -> str:
    if isinstance(reference, Checkpoint):
        return reference.info(name).dtype
    return dtypes.storage_name_for_array(reference[name])


def _reference_raw(reference, name: str) -> np.ndarray:
    if isinstance(reference, Checkpoint):
        return reference.read_raw(name)
    return reference[name]


def write_merge_output(
    path: str, outcome: MergeOutcome, reference, dtype_policy: str
) -> None:
    """Write merged tensors, splicing updates over the reference's raw bytes.

    ``reference`` is the base checkpoint for additive methods and the first
    input for linear merges; it supplies the on-disk dtype under the "keep"
    policy and the untouched payload bytes for the splice.
    """
    if dtype_policy not in (DTYPE_KEEP, DTYPE_F32):
        raise ValidationError(f"unknown dtype policy {dtype_policy!r}")
    entries: dict[str, TensorEntry] = {}
    for name, arr in outcome.arrays.items():
        orig = _reference_dtype(reference, name)
        is_float = dtypes.is_float(orig)
        if dtype_policy == DTYPE_F32 and is_float:
            entries[name] = TensorEntry(dtype="F32", data=np.asarray(arr, dtype=np.float32))
            continue
        if outcome.replace_all:
            if is_float:
                entries[name] = TensorEntry(dtype=orig, data=arr)
            else:
                entries[name] = TensorEntry.from_array(arr)
            continue
        hits = outcome.touched.get(name)
        if hits is None or hits.size == 0:
            entries[name] = TensorEntry(
                dtype=orig, data=_reference_raw(reference, name), raw=True
            )
            continue
        raw = np.array(_reference_raw(reference, name), copy=True)
        updates = np.asarray(arr).ravel()[hits]
        if orig == "BF16":
            raw.ravel()[hits] = dtypes.f32_to_bf16(np.asarray(updates, dtype=np.float32))
        else:
            raw.ravel()[hits] = np.asarray(updates, dtype=raw.dtype)
        entries[name] = TensorEntry(dtype=orig, data=raw, raw=True)
    write_checkpoint(path, entries, metadata={"method": outcome.report.method})


def _execute_recipe(recipe: MergeRecipe, threads: int) -> tuple[MergeOutcome, object]:
    task = open_checkpoint(recipe.task_model)
    reasoning = open_checkpoint(recipe.reasoning_model)
    if recipe.method == METHOD_LINEAR:
        outcome = linear_merge([task, reasoning], list(recipe.weights), threads=threads)
        return outcome, task

    base = open_checkpoint(recipe.base)
    if recipe.method == METHOD_REASON_ANY:
        imp_t = load_importance_source(recipe.task_importance, task)
        imp_r = load_importance_source(recipe.reasoning_importance, reasoning)
        outcome = reason_any_merge(
            base,
            task,
            reasoning,
            imp_t,
            imp_r,
            p_t=recipe.p_t,
            p_r=recipe.p_r,
            lambda_t=recipe.lambda_t,
            lambda_r=recipe.lambda_r,
            scope=recipe.scope,
            zero_policy=recipe.zero_policy,
            include_patterns=recipe.include_patterns,
            exclude_patterns=recipe.exclude_patterns,
            threads=threads,
        )
    elif recipe.method == METHOD_TASK_ARITHMETIC:
        outcome = task_arithmetic_merge(
            base,
            [task, reasoning],
            lam=recipe.lambda_t,
            include_patterns=recipe.include_patterns,
            exclude_patterns=recipe.exclude_patterns,
            threads=threads,
        )
    elif recipe.method == METHOD_TIES:
        outcome = ties_merge(
            base,
            [task, reasoning],
            lam=recipe.lambda_t,
            density=recipe.density,
            include_patterns=recipe.include_patterns,
            exclude_patterns=recipe.exclude_patterns,
            threads=threads,
        )
    elif recipe.method == METHOD_DARE:
        outcome = dare_merge(
            base,
            [task, reasoning],
            lam=recipe.lambda_t,
            drop_rate=recipe.drop_rate,
            seed=recipe.seed,
            include_patterns=recipe.include_patterns,
            exclude_patterns=recipe.exclude_patterns,
            threads=threads,
        )
    else:
        raise ValidationError(f"unknown method {recipe.method!r}")
    return outcome, base


def merge_op(
    recipe_obj: Mapping[str, object],
    overrides: Mapping[str, object] | None = None,
    threads: int | None = None,
) -> dict:
    """Parse, merge, and write the output checkpoint plus optional report."""
    threads = resolve_threads(threads)
    recipe, notes = parse_recipe(recipe_obj, overrides)
    for note in notes:
        logger.info("override %s", note)
    _log_config("merge", {**recipe.resolved(), "threads": threads})

    outcome, reference = _execute_recipe(recipe, threads)
    for warning in outcome.report.warnings:
        logger.warning("%s", warning)
    report_doc = outcome.report.to_json()
    report_doc["recipe"] = recipe.resolved()

    stager = OutputStager()
    try:
        write_merge_output(
            stager.stage(recipe.output), outcome, reference, recipe.dtype_policy
        )
        if recipe.report_output:
            write_json_doc(stager.stage(recipe.report_output), report_doc)
        stager.commit()
    except BaseException:
        stager.abort()
        raise
    logger.info("wrote %s", recipe.output)
    if recipe.report_output:
        logger.info("wrote %s", recipe.report_output)
    return {
        "output": recipe.output,
        "report_output": recipe.report_output,
        "report": report_doc,
    }


def importance_op(
    model: str, calib: str, out: str, samples: int = DEFAULT_SAMPLE_CAP
) -> dict:
    """Toy-oracle importance: mean |gradient| over a calibration prefix."""
    if isinstance(samples, bool) or not isinstance(samples, int) or samples < 1:
        raise ValidationError(f"sample cap must be a positive integer, got {samples!r}")
    _log_config(
        "importance", {"model": model, "calib": calib, "out": out, "samples": samples}
    )
    toy = load_toy_model(model)
    calibration = first_samples(load_calibration(calib), samples)
    imp = toy_importance(toy, calibration)
    imp = dataclasses.replace(imp, model_id=model_label(model))

    stager = OutputStager()
    try:
        save_importance(stager.stage(out), imp)
        stager.commit()
    except BaseException:
        stager.abort()
        raise
    logger.info("wrote %s", out)
    return {
        "output": out,
        "tensors": len(imp.scores),
        "sample_count": imp.sample_count,
        "calibration_id": imp.calibration_id,
        "model_id": imp.model_id,
    }


def spectral_op(
    grads: str,
    pattern: str | None = None,
    out: str | None = None,
    csv_out: str | None = None,
    model_id: str = "",
    keep_singular_values: bool = False,
    threads: int | None = None,
) -> dict:
    """Per-layer nuclear/Frobenius norm report over a gradient dump."""
    threads = resolve_threads(threads)
    pattern = pattern or DEFAULT_LAYER_PATTERN
    _log_config(
        "spectral",
        {
            "grads": grads,
            "pattern": pattern,
            "out": out,
            "csv": csv_out,
            "model_id": model_id,
            "keep_singular_values": keep_singular_values,
            "threads": threads,
        },
    )
    ckpt = open_checkpoint(grads)
    arrays = {name: ckpt.read(name, upcast=True) for name in ckpt.names()}
    report = layerwise_spectral_report(
        arrays,
        pattern,
        model_id=model_id or model_label(grads),
        keep_singular_values=keep_singular_values,
        threads=threads,
    )
    doc = report.to_json()

    stager = OutputStager()
    try:
        if out:
            write_json_doc(stager.stage(out), doc)
        if csv_out:
            write_text(stager.stage(csv_out), report.to_csv())
        stager.commit()
    except BaseException:
        stager.abort()
        raise
    for path in (out, csv_out):
        if path:
            logger.info("wrote %s", path)
    return {"out": out, "csv": csv_out, "report": doc}


def inject_op(
    base: str,
    donor: str,
    importance: object,
    p: float,
    direction: str,
    output: str,
    lam: float = 1.0,
    scope: str = SCOPE_GLOBAL,
    zero_policy: str = ZERO_INCLUDE,
    include_patterns: Sequence[str] | None = None,
    exclude_patterns: Sequence[str] | None = None,
    dtype_policy: str = DTYPE_KEEP,
    report_output: str | None = None,
    threads: int | None = None,
) -> dict:
    """One-sided masked delta injection from a donor checkpoint into a base."""
    threads = resolve_threads(threads)
    if direction not in DIRECTION_TO_SELECT:
        raise ValidationError(
            f"direction must be 'highest' or 'lowest', got {direction!r}"
        )
    _log_config(
        "inject",
        {
            "base": base,
            "donor": donor,
            "importance": importance,
            "p": p,
            "direction": direction,
            "lambda": lam,
            "scope": scope,
            "zero_policy": zero_policy,
            "include_patterns": list(include_patterns) if include_patterns else None,
            "exclude_patterns": list(exclude_patterns) if exclude_patterns else None,
            "dtype_policy": dtype_policy,
            "output": output,
            "report_output": report_output,
            "threads": threads,
        },
    )
    base_ckpt = open_checkpoint(base)
    donor_ckpt = open_checkpoint(donor)
    imp = load_importance_source(importance, donor_ckpt)
    outcome = additive_inject(
        base_ckpt,
        donor_ckpt,
        imp,
        p,
        select=DIRECTION_TO_SELECT[direction],
        lam=lam,
        scope=scope,
        zero_policy=zero_policy,
        include_patterns=include_patterns,
        exclude_patterns=exclude_patterns,
        threads=threads,
    )
    report_doc = outcome.report.to_json()

    stager = OutputStager()
    try:
        write_merge_output(stager.stage(output), outcome, base_ckpt, dtype_policy)
        if report_output:
            write_json_doc(stager.stage(report_output), report_doc)
        stager.commit()
    except BaseException:
        stager.abort()
        raise
    logger.info("wrote %s", output)
    return {"output": output, "report_output": report_output, "report": report_doc}


def inspect_op(checkpoint: str) -> dict:
    """Names, dtypes, and shapes of one checkpoint, header only."""
    _log_config("inspect", {"checkpoint": checkpoint})
    ckpt = open_checkpoint(checkpoint)
    tensors = []
    total_bytes = 0
    for name in ckpt.names():
        info = ckpt.info(name)
        total_bytes += info.nbytes
        tensors.append(
            {
                "name": name,
                "dtype": info.dtype,
                "shape": list(info.shape),
                "numel": info.numel,
                "nbytes": info.nbytes,
            }
        )
    return {
        "path": checkpoint,
        "metadata": dict(ckpt.metadata),
        "tensor_count": len(tensors),
        "data_bytes": total_bytes,
        "tensors": tensors,
    }


def experiment_op(
    config_obj: Mapping[str, object],
    kind: str = "both",
    out_dir: str | None = None,
    threads: int | None = None,
) -> dict:
    """Run the toy experiments and emit their tables as JSON and CSV."""
    threads = resolve_threads(threads)
    if kind not in EXPERIMENT_KINDS:
        listed = ", ".join(repr(k) for k in EXPERIMENT_KINDS)
        raise ValidationError(f"experiment kind must be one of {listed}, got {kind!r}")
    cfg = config_from_json(config_obj)
    _log_config(
        "experiment",
        {**config_echo(cfg), "kind": kind, "out_dir": out_dir, "threads": threads},
    )
    tables = {}
    if kind in ("additive", "both"):
        tables["additive"] = run_additive_experiment(cfg, threads=threads)
    if kind in ("comparison", "both"):
        tables["comparison"] = run_merge_comparison(cfg, threads=threads)

    files: list[str] = []
    if out_dir:
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create {out_dir}: {exc}") from None
        stager = OutputStager()
        try:
            for name, table in tables.items():
                json_path = os.path.join(out_dir, f"{name}.json")
                csv_path = os.path.join(out_dir, f"{name}.csv")
                write_json_doc(stager.stage(json_path), table.to_json())
                write_text(stager.stage(csv_path), table.to_csv())
                files.extend([json_path, csv_path])
            stager.commit()
        except BaseException:
            stager.abort()
            raise
        for path in files:
            logger.info("wrote %s", path)
    return {
        "out_dir": out_dir,
        "files": files,
        "tables": {name: table.to_json() for name, table in tables.items()},
    }
