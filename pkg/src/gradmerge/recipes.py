"""Merge recipe schema: one strict JSON object in, resolved parameters out.

A recipe carries a fixed key vocabulary; unknown keys are hard errors so a
typo never silently falls back to a default. Each method demands exactly its
own fields: required keys must be present, tunables fall back to documented
defaults, and keys belonging to other methods are rejected. Importance
sources are either a file path or an inline toy-oracle config naming a toy
model checkpoint and a calibration file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import FormatError, IoError, ValidationError
from .merge_engine import (
    METHOD_DARE,
    METHOD_LINEAR,
    METHOD_REASON_ANY,
    METHOD_TASK_ARITHMETIC,
    METHOD_TIES,
)
from .selection import SCOPE_GLOBAL, SCOPE_PER_TENSOR, ZERO_EXCLUDE, ZERO_INCLUDE

DTYPE_KEEP = "keep"
DTYPE_F32 = "f32"
DTYPE_POLICIES = (DTYPE_KEEP, DTYPE_F32)

DEFAULT_SAMPLE_CAP = 100

RECIPE_KEYS = (
    "method",
    "base",
    "task_model",
    "reasoning_model",
    "task_importance",
    "reasoning_importance",
    "p_t",
    "p_r",
    "lambda_t",
    "lambda_r",
    "scope",
    "zero_policy",
    "include_patterns",
    "exclude_patterns",
    "dtype_policy",
    "seed",
    "density",
    "drop_rate",
    "weights",
    "output",
    "report_output",
)

RECIPE_METHODS = (
    METHOD_REASON_ANY,
    METHOD_LINEAR,
    METHOD_TASK_ARITHMETIC,
    METHOD_TIES,
    METHOD_DARE,
)

_IMPORTANCE_SOURCE_KEYS = ("toy_model", "calibration", "samples")

_COMMON_OPTIONAL = {"dtype_policy": DTYPE_KEEP, "report_output": None}
_FILTER_OPTIONAL = {"include_patterns": None, "exclude_patterns": None}
_BASELINE_REQUIRED = ("base", "task_model", "reasoning_model", "output")
_BASELINE_OPTIONAL = {
    "lambda_t": 0.3,
    "lambda_r": 0.3,
    **_FILTER_OPTIONAL,
    **_COMMON_OPTIONAL,
}

# method -> (required keys, optional keys with their defaults); every other
# recipe key is rejected for that method
_METHOD_FIELDS: dict[str, tuple[tuple[str, ...], dict[str, object]]] = {
    METHOD_REASON_ANY: (
        (
            "base",
            "task_model",
            "reasoning_model",
            "task_importance",
            "reasoning_importance",
            "output",
        ),
        {
            "p_t": 0.05,
            "p_r": 0.05,
            "lambda_t": 1.0,
            "lambda_r": 1.0,
            "scope": SCOPE_GLOBAL,
            "zero_policy": ZERO_INCLUDE,
            **_FILTER_OPTIONAL,
            **_COMMON_OPTIONAL,
        },
    ),
    METHOD_LINEAR: (
        ("task_model", "reasoning_model", "output"),
        {"weights": (0.5, 0.5), **_COMMON_OPTIONAL},
    ),
    METHOD_TASK_ARITHMETIC: (_BASELINE_REQUIRED, dict(_BASELINE_OPTIONAL)),
    METHOD_TIES: (_BASELINE_REQUIRED, {"density": 0.1, **_BASELINE_OPTIONAL}),
    METHOD_DARE: (
        _BASELINE_REQUIRED,
        {"drop_rate": 0.9, "seed": 0, **_BASELINE_OPTIONAL},
    ),
}


@dataclass(frozen=True)
class MergeRecipe:
    """One fully-resolved merge request. Fields a method does not use are None."""

    method: str
    task_model: str
    reasoning_model: str
    output: str
    base: str | None = None
    task_importance: object = None
    reasoning_importance: object = None
    p_t: float | None = None
    p_r: float | None = None
    lambda_t: float | None = None
    lambda_r: float | None = None
    scope: str | None = None
    zero_policy: str | None = None
    include_patterns: tuple[str, ...] | None = None
    exclude_patterns: tuple[str, ...] | None = None
    dtype_policy: str = DTYPE_KEEP
    seed: int | None = None
    density: float | None = None
    drop_rate: float | None = None
    weights: tuple[float, ...] | None = None
    report_output: str | None = None

    def resolved(self) -> dict:
        """Every recipe key with its resolved value, in JSON-ready form."""
        out: dict[str, object] = {}
        for key in RECIPE_KEYS:
            value = getattr(self, key)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_string(key: str, value: object) -> str:
    if not isinstance(value, str) or not value:
        raise ValidationError(f"recipe key {key!r} must be a non-empty string")
    return value


def _check_ratio(key: str, value: object) -> float:
    if not _is_number(value):
        raise ValidationError(f"recipe key {key!r} must be a number")
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise ValidationError(f"recipe key {key!r} must be in [0, 1], got {value}")
    return value


def _check_finite(key: str, value: object) -> float:
    if not _is_number(value):
        raise ValidationError(f"recipe key {key!r} must be a number")
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"recipe key {key!r} must be finite, got {value}")
    return value


def _check_int(key: str, value: object) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"recipe key {key!r} must be an integer")
    return value


def _check_choice(key: str, value: object, options: Sequence[str]) -> str:
    if value not in options:
        listed = ", ".join(repr(o) for o in options)
        raise ValidationError(f"recipe key {key!r} must be one of {listed}, got {value!r}")
    return str(value)


def _check_patterns(key: str, value: object) -> tuple[str, ...]:
    if not isinstance(value, list):
        raise ValidationError(f"recipe key {key!r} must be an array of strings")
    for item in value:
        if not isinstance(item, str) or not item:
            raise ValidationError(f"recipe key {key!r} must be an array of non-empty strings")
    return tuple(value)


def _check_weights(key: str, value: object) -> tuple[float, ...]:
    if not isinstance(value, list) or not value:
        raise ValidationError(f"recipe key {key!r} must be a non-empty array of numbers")
    out = []
    for item in value:
        if not _is_number(item) or not math.isfinite(float(item)):
            raise ValidationError(f"recipe key {key!r} must contain only finite numbers")
        out.append(float(item))
    return tuple(out)


def _check_importance_source(key: str, value: object) -> object:
    """A source is a checkpoint path or a toy-oracle config object."""
    if isinstance(value, str):
        if not value:
            raise ValidationError(f"recipe key {key!r} must be a non-empty path")
        return value
    if not isinstance(value, dict):
        raise ValidationError(
            f"recipe key {key!r} must be a file path or a toy-oracle config object"
        )
    for sub in value:
        if sub not in _IMPORTANCE_SOURCE_KEYS:
            raise ValidationError(f"unknown importance source key {sub!r} in {key}")
    for sub in ("toy_model", "calibration"):
        if sub not in value:
            raise ValidationError(f"importance source {key} is missing key {sub!r}")
        _check_string(f"{key}.{sub}", value[sub])
    samples = value.get("samples", DEFAULT_SAMPLE_CAP)
    if isinstance(samples, bool) or not isinstance(samples, int) or samples < 1:
        raise ValidationError(f"importance source key {key}.samples must be a positive integer")
    return {
        "toy_model": value["toy_model"],
        "calibration": value["calibration"],
        "samples": samples,
    }


def _validate_value(key: str, value: object) -> object:
    if key in ("base", "task_model", "reasoning_model", "output", "report_output"):
        return _check_string(key, value)
    if key in ("task_importance", "reasoning_importance"):
        return _check_importance_source(key, value)
    if key in ("p_t", "p_r"):
        return _check_ratio(key, value)
    if key in ("lambda_t", "lambda_r", "density", "drop_rate"):
        return _check_finite(key, value)
    if key == "scope":
        return _check_choice(key, value, (SCOPE_GLOBAL, SCOPE_PER_TENSOR))
    if key == "zero_policy":
        return _check_choice(key, value, (ZERO_INCLUDE, ZERO_EXCLUDE))
    if key == "dtype_policy":
        return _check_choice(key, value, DTYPE_POLICIES)
    if key in ("include_patterns", "exclude_patterns"):
        return _check_patterns(key, value)
    if key == "seed":
        return _check_int(key, value)
    if key == "weights":
        return _check_weights(key, value)
    raise ValidationError(f"unknown recipe key {key!r}")


def parse_recipe(
    raw: Mapping[str, object],
    overrides: Mapping[str, object] | None = None,
) -> tuple[MergeRecipe, list[str]]:
    """Validate a recipe object, apply flag overrides, resolve all defaults.

    Returns the recipe plus one human-readable note per override applied, so
    the caller can log exactly how conflicts between flags and recipe fields
    were resolved (the flag wins).
    """
    if not isinstance(raw, Mapping):
        raise FormatError("recipe is not a JSON object")
    for key in raw:
        if key not in RECIPE_KEYS:
            raise ValidationError(f"unknown recipe key {key!r}")

    notes: list[str] = []
    merged: dict[str, object] = dict(raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in RECIPE_KEYS:
            raise ValidationError(f"unknown recipe key {key!r}")
        if key in merged:
            if merged[key] == value:
                continue
            notes.append(f"{key}: flag value {value!r} overrides recipe value {merged[key]!r}")
        else:
            notes.append(f"{key}: set to {value!r} by flag")
        merged[key] = value

    for key, value in merged.items():
        if value is None:
            raise ValidationError(f"recipe key {key!r} is null; omit unused keys")

    if "method" not in merged:
        raise ValidationError("recipe is missing required key 'method'")
    method = merged["method"]
    if method not in RECIPE_METHODS:
        listed = ", ".join(repr(m) for m in RECIPE_METHODS)
        raise ValidationError(f"unknown method {method!r}; expected one of {listed}")

    required, optional = _METHOD_FIELDS[method]
    allowed = {"method", *required, *optional}
    for key in merged:
        if key not in allowed:
            raise ValidationError(f"recipe key {key!r} does not apply to method {method!r}")
    for key in required:
        if key not in merged:
            raise ValidationError(f"method {method!r} requires recipe key {key!r}")

    resolved: dict[str, object] = {key: None for key in RECIPE_KEYS}
    resolved["method"] = method
    resolved.update(optional)
    for key, value in merged.items():
        if key == "method":
            continue
        resolved[key] = _validate_value(key, value)

    if method != METHOD_REASON_ANY and method != METHOD_LINEAR:
        if resolved["lambda_t"] != resolved["lambda_r"]:
            raise ValidationError(
                f"method {method!r} uses a single scaling factor; "
                f"lambda_t {resolved['lambda_t']} != lambda_r {resolved['lambda_r']}"
            )

    return MergeRecipe(**resolved), notes


def _reject_duplicate_keys(pairs: list[tuple[str, object]]) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in pairs:
        if key in out:
            raise FormatError(f"duplicate recipe key {key!r}")
        out[key] = value
    return out


def load_json_object(path: str, what: str) -> dict:
    """Read a strict JSON object file; duplicate keys are format errors."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise IoError(f"{what} file not found: {path}") from None
    except IsADirectoryError:
        raise IoError(f"{what} path is a directory: {path}") from None
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    try:
        parsed = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except FormatError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"{what} is not valid JSON: {exc.msg} at line {exc.lineno}"
        ) from None
    if not isinstance(parsed, dict):
        raise FormatError(f"{what} is not a JSON object")
    return parsed


def load_recipe(
    path: str, overrides: Mapping[str, object] | None = None
) -> tuple[MergeRecipe, list[str]]:
    return parse_recipe(load_json_object(path, "recipe"), overrides)
