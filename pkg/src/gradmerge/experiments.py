"""Desk-scale training, injection, and merge-comparison experiments.

Everything runs on the f64 toy models with their exact gradient oracle. The
synthetic world is a shared input space split into two coordinate blocks;
each task's targets depend on one block only, so specialists fine-tuned from
a common base concentrate their deltas on different coordinates. That makes
the selective-injection outcomes constructible and the degeneration cases
(zero scale, full or empty selection) exact.

Determinism contract: a config fully determines every table. The seed feeds
one generator consumed in a fixed order (task rules, model init, datasets);
training iterates samples in dataset order; grids expand in declaration
order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .importance import ImportanceMap
from .merge_engine import (
    METHOD_DARE,
    METHOD_LINEAR,
    METHOD_REASON_ANY,
    METHOD_TASK_ARITHMETIC,
    METHOD_TIES,
    SELECT_BOTTOM,
    SELECT_TOP,
    additive_inject,
    dare_merge,
    linear_merge,
    reason_any_merge,
    task_arithmetic_merge,
    ties_merge,
)
from .toy import (
    CalibrationSet,
    Sample,
    ToyModel,
    random_toy_model,
    snap_to_grid,
    toy_backward,
    toy_forward_loss,
    toy_importance,
)

DIRECTION_HIGHEST = "highest"
DIRECTION_LOWEST = "lowest"


def config_echo(cfg: "ExperimentConfig") -> dict:
    return {
        k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()
    }

KNOWN_METHODS = (
    METHOD_REASON_ANY,
    METHOD_LINEAR,
    METHOD_TASK_ARITHMETIC,
    METHOD_TIES,
    METHOD_DARE,
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Architecture, synthetic tasks, training budget, and grids."""

    seed: int = 0
    input_dim: int = 12
    hidden_dims: tuple[int, ...] = (24,)
    output_dim: int = 6
    block_a: int = 6
    block_leak: float = 0.1
    train_samples: int = 48
    calib_samples: int = 48
    steps: int = 120
    fine_steps: int = 40
    learning_rate: float = 0.05
    injection_ratios: tuple[float, ...] = (0.10, 0.05, 0.01)
    injection_scale: float = 1.0
    merge_methods: tuple[str, ...] = KNOWN_METHODS
    p_values: tuple[float, ...] = (0.05,)
    lambda_values: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if not (0 <= self.seed < 2**64):
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.input_dim < 2:
            raise ValidationError(f"input_dim must be at least 2, got {self.input_dim}")
        if self.output_dim < 1:
            raise ValidationError(f"output_dim must be positive, got {self.output_dim}")
        if not (1 <= self.block_a < self.input_dim):
            raise ValidationError(
                f"block_a must split the input: need 1 <= block_a < {self.input_dim}, got {self.block_a}"
            )
        if not (0.0 <= self.block_leak <= 1.0):
            raise ValidationError(f"block_leak must be in [0, 1], got {self.block_leak}")
        for h in self.hidden_dims:
            if h < 1:
                raise ValidationError(f"hidden dims must be positive, got {h}")
        for label, value in [("train_samples", self.train_samples), ("calib_samples", self.calib_samples)]:
            if value < 1:
                raise ValidationError(f"{label} must be positive, got {value}")
        for label, value in [("steps", self.steps), ("fine_steps", self.fine_steps)]:
            if value < 0:
                raise ValidationError(f"{label} must be non-negative, got {value}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not math.isfinite(self.injection_scale):
            raise ValidationError("injection_scale must be finite")
        if not self.injection_ratios:
            raise ValidationError("injection_ratios must be non-empty")
        for p in self.injection_ratios:
            if not (0.0 <= p <= 1.0):
                raise ValidationError(f"injection ratio must be in [0, 1], got {p}")
        if not self.merge_methods:
            raise ValidationError("merge_methods must be non-empty")
        for m in self.merge_methods:
            if m not in KNOWN_METHODS:
                raise ValidationError(f"unknown method {m!r}")
        if not self.p_values:
            raise ValidationError("p_values must be non-empty")
        for p in self.p_values:
            if not (0.0 <= p <= 1.0):
                raise ValidationError(f"p value must be in [0, 1], got {p}")
        if not self.lambda_values:
            raise ValidationError("lambda_values must be non-empty")
        for lam in self.lambda_values:
            if not math.isfinite(lam):
                raise ValidationError(f"lambda value must be finite, got {lam}")


_CONFIG_FIELDS = {f: None for f in ExperimentConfig.__dataclass_fields__}
_TUPLE_FIELDS = {
    "hidden_dims": int,
    "injection_ratios": float,
    "merge_methods": str,
    "p_values": float,
    "lambda_values": float,
}


def config_from_json(obj: Mapping) -> ExperimentConfig:
    """Build a config from a parsed JSON object; unknown keys are an error."""
    if not isinstance(obj, Mapping):
        raise ValidationError("experiment config must be a JSON object")
    unknown = sorted(set(obj) - set(_CONFIG_FIELDS))
    if unknown:
        raise ValidationError(f"unknown config key {unknown[0]!r}")
    kwargs = {}
    for key, value in obj.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ValidationError(f"config key {key!r} must be an array")
            conv = _TUPLE_FIELDS[key]
            try:
                kwargs[key] = tuple(conv(v) for v in value)
            except (TypeError, ValueError):
                raise ValidationError(f"config key {key!r} has a value of the wrong type")
        elif key in ("learning_rate", "injection_scale", "block_leak"):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValidationError(f"config key {key!r} must be a number")
            kwargs[key] = float(value)
        else:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValidationError(f"config key {key!r} must be an integer")
            kwargs[key] = int(value)
    return ExperimentConfig(**kwargs)


@dataclass(frozen=True)
class ExperimentTable:
    """Deterministic experiment output: reference losses plus grid rows."""

    kind: str
    references: Mapping[str, float]
    rows: tuple[Mapping[str, object], ...]
    config: Mapping[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "references": dict(self.references),
            "rows": [dict(r) for r in self.rows],
            "config": dict(self.config),
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        if not self.rows:
            return ""
        header = list(self.rows[0].keys())
        writer.writerow(header)
        for row in self.rows:
            cells = []
            for key in header:
                value = row[key]
                if value is None:
                    cells.append("")
                elif isinstance(value, float):
                    cells.append(repr(value))
                else:
                    cells.append(value)
            writer.writerow(cells)
        return out.getvalue()


def mean_loss(model: ToyModel, data: CalibrationSet) -> float:
    total = 0.0
    for sample in data.samples:
        total += toy_forward_loss(model, sample)
    return total / len(data.samples)


def train_toy_model(
    model: ToyModel, data: CalibrationSet, steps: int, learning_rate: float
) -> ToyModel:
    """Full-batch gradient descent; weights snapped to the dyadic grid."""
    cur = model
    for step in range(steps):
        weight_map = cur.to_weight_map()
        total = {name: np.zeros_like(value) for name, value in weight_map.items()}
        loss_sum = 0.0
        # non-finite transients are expected and reported below, not warned about
        with np.errstate(over="ignore", invalid="ignore"):
            for sample in data.samples:
                loss_sum += toy_forward_loss(cur, sample)
                grads = toy_backward(cur, sample)
                for name in total:
                    total[name] += grads[name]
            if not math.isfinite(loss_sum):
                raise ValidationError(f"training diverged at step {step}")
            count = len(data.samples)
            new_map = {
                name: snap_to_grid(value - learning_rate * (total[name] / count))
                for name, value in weight_map.items()
            }
        if any(not np.isfinite(a).all() for a in new_map.values()):
            raise ValidationError(f"training diverged at step {step}")
        cur = cur.with_weight_map(new_map)
    return cur


@dataclass(frozen=True)
class ToyWorld:
    """Seeded task rules, initial model, and datasets for one experiment."""

    init: ToyModel
    mixed_train: CalibrationSet
    train_a: CalibrationSet
    train_b: CalibrationSet
    calib_a: CalibrationSet
    calib_b: CalibrationSet


def _make_samples(
    rng: np.random.Generator,
    cfg: ExperimentConfig,
    rule_a: np.ndarray,
    rule_b: np.ndarray,
    scale_a: float,
    scale_b: float,
    count: int,
    set_id: str,
) -> CalibrationSet:
    """Inputs drawn blockwise at the given scales; targets from the world rule.

    A task set drives its own block at full scale and the other at the small
    leak scale, so off-task gradients are small but not exactly zero."""
    samples = []
    split = cfg.block_a
    for _ in range(count):
        x = np.zeros(cfg.input_dim, dtype=np.float64)
        if scale_a > 0:
            x[:split] = snap_to_grid(rng.uniform(-scale_a, scale_a, split))
        if scale_b > 0:
            x[split:] = snap_to_grid(rng.uniform(-scale_b, scale_b, cfg.input_dim - split))
        y = np.tanh(rule_a @ x[:split]) + np.tanh(rule_b @ x[split:])
        samples.append(Sample(x=x, y=y))
    return CalibrationSet(samples=tuple(samples), id=set_id)


def build_world(cfg: ExperimentConfig) -> ToyWorld:
    rng = np.random.default_rng(cfg.seed)
    rule_a = snap_to_grid(rng.standard_normal((cfg.output_dim, cfg.block_a)) * 0.8)
    rule_b = snap_to_grid(
        rng.standard_normal((cfg.output_dim, cfg.input_dim - cfg.block_a)) * 0.8
    )
    init = random_toy_model(
        rng, dims=(cfg.input_dim, *cfg.hidden_dims, cfg.output_dim)
    )
    leak = cfg.block_leak
    make = lambda scale_a, scale_b, count, set_id: _make_samples(
        rng, cfg, rule_a, rule_b, scale_a, scale_b, count, set_id
    )
    return ToyWorld(
        init=init,
        mixed_train=make(1.0, 1.0, cfg.train_samples, "mixed-train"),
        train_a=make(1.0, leak, cfg.train_samples, "task-a-train"),
        train_b=make(leak, 1.0, cfg.train_samples, "task-b-train"),
        calib_a=make(1.0, leak, cfg.calib_samples, "task-a-calib"),
        calib_b=make(leak, 1.0, cfg.calib_samples, "task-b-calib"),
    )


def injection_table(
    base: ToyModel,
    specialist: ToyModel,
    importance: ImportanceMap,
    eval_set: CalibrationSet,
    ratios: Sequence[float],
    scale: float = 1.0,
    config_echo: Mapping | None = None,
    threads: int = 1,
) -> ExperimentTable:
    """Loss after injecting top/bottom importance-selected deltas into base."""
    base_map = base.to_weight_map()
    spec_map = specialist.to_weight_map()
    base_loss = mean_loss(base, eval_set)
    spec_loss = mean_loss(specialist, eval_set)
    rows = []
    for p in ratios:
        for direction in (DIRECTION_HIGHEST, DIRECTION_LOWEST):
            select = SELECT_TOP if direction == DIRECTION_HIGHEST else SELECT_BOTTOM
            out = additive_inject(
                base_map, spec_map, importance, p,
                select=select, lam=scale, threads=threads,
            )
            merged = base.with_weight_map(out.arrays)
            loss = mean_loss(merged, eval_set)
            rows.append(
                {
                    "direction": direction,
                    "p": p,
                    "loss": loss,
                    "delta_loss": loss - base_loss,
                    "updated_params": out.report.updated_params,
                }
            )
    return ExperimentTable(
        kind="additive-injection",
        references={"base_loss": base_loss, "specialist_loss": spec_loss},
        rows=tuple(rows),
        config=dict(config_echo) if config_echo else {},
    )


def run_additive_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentTable:
    """Train a base and one specialist, inject masked deltas, tabulate losses."""
    world = build_world(cfg)
    base = train_toy_model(world.init, world.mixed_train, cfg.steps, cfg.learning_rate)
    specialist = train_toy_model(base, world.train_a, cfg.fine_steps, cfg.learning_rate)
    importance = toy_importance(specialist, world.calib_a)
    return injection_table(
        base,
        specialist,
        importance,
        world.calib_a,
        cfg.injection_ratios,
        scale=cfg.injection_scale,
        config_echo=config_echo(cfg),
        threads=threads,
    )


def run_merge_comparison(cfg: ExperimentConfig, threads: int = 1) -> ExperimentTable:
    """Train two specialists from one base and compare every merge method.

    Grid expansion: reason-any runs at every (p, lambda) pair; the additive
    baselines run at every lambda with their own trim/drop defaults
    (ties density 0.1, dare drop rate 0.9); linear runs once at equal
    weights.
    """
    world = build_world(cfg)
    base = train_toy_model(world.init, world.mixed_train, cfg.steps, cfg.learning_rate)
    expert_a = train_toy_model(base, world.train_a, cfg.fine_steps, cfg.learning_rate)
    expert_b = train_toy_model(base, world.train_b, cfg.fine_steps, cfg.learning_rate)
    imp_a = toy_importance(expert_a, world.calib_a)
    imp_b = toy_importance(expert_b, world.calib_b)
    base_map = base.to_weight_map()
    a_map = expert_a.to_weight_map()
    b_map = expert_b.to_weight_map()

    references = {
        "base_loss_a": mean_loss(base, world.calib_a),
        "base_loss_b": mean_loss(base, world.calib_b),
        "expert_a_loss": mean_loss(expert_a, world.calib_a),
        "expert_b_loss": mean_loss(expert_b, world.calib_b),
    }

    def evaluate(outcome, method, p, lam):
        merged = base.with_weight_map(outcome.arrays)
        loss_a = mean_loss(merged, world.calib_a)
        loss_b = mean_loss(merged, world.calib_b)
        return {
            "method": method,
            "p": p,
            "lambda": lam,
            "loss_a": loss_a,
            "loss_b": loss_b,
            "max_degradation": max(
                loss_a - references["expert_a_loss"],
                loss_b - references["expert_b_loss"],
            ),
        }

    rows = []
    for method in cfg.merge_methods:
        if method == METHOD_REASON_ANY:
            for p in cfg.p_values:
                for lam in cfg.lambda_values:
                    out = reason_any_merge(
                        base_map, a_map, b_map, imp_a, imp_b,
                        p_t=p, p_r=p, lambda_t=lam, lambda_r=lam,
                        threads=threads,
                    )
                    rows.append(evaluate(out, method, p, lam))
        elif method == METHOD_LINEAR:
            out = linear_merge([a_map, b_map], [0.5, 0.5], threads=threads)
            rows.append(evaluate(out, method, None, None))
        elif method == METHOD_TASK_ARITHMETIC:
            for lam in cfg.lambda_values:
                out = task_arithmetic_merge(
                    base_map, [a_map, b_map], lam=lam, threads=threads
                )
                rows.append(evaluate(out, method, None, lam))
        elif method == METHOD_TIES:
            for lam in cfg.lambda_values:
                out = ties_merge(
                    base_map, [a_map, b_map], lam=lam, density=0.1, threads=threads
                )
                rows.append(evaluate(out, method, None, lam))
        elif method == METHOD_DARE:
            for lam in cfg.lambda_values:
                out = dare_merge(
                    base_map, [a_map, b_map], lam=lam, drop_rate=0.9, seed=cfg.seed,
                    threads=threads,
                )
                rows.append(evaluate(out, method, None, lam))
    return ExperimentTable(
        kind="merge-comparison",
        references=references,
        rows=tuple(rows),
        config=config_echo(cfg),
    )


def first_order_sensitivity_wins(
    cfg: ExperimentConfig, trials: int, delta: float = 1e-3
) -> dict[float, int]:
    """Count trials where |delta-loss(lowest)| <= |delta-loss(highest)| per ratio."""
    wins = {p: 0 for p in cfg.injection_ratios}
    for t in range(trials):
        table = run_additive_experiment(
            replace(cfg, seed=cfg.seed + t, injection_scale=delta)
        )
        by_key = {(r["direction"], r["p"]): r["delta_loss"] for r in table.rows}
        for p in cfg.injection_ratios:
            low = abs(by_key[(DIRECTION_LOWEST, p)])
            high = abs(by_key[(DIRECTION_HIGHEST, p)])
            if low <= high:
                wins[p] += 1
    return wins
