"""Experiment harness: exact degenerations, determinism, and construction oracles."""

import json
import math
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pytest

from gradmerge.errors import ValidationError
from gradmerge.experiments import (
    ExperimentConfig,
    build_world,
    config_from_json,
    first_order_sensitivity_wins,
    injection_table,
    mean_loss,
    run_additive_experiment,
    run_merge_comparison,
    train_toy_model,
)
from gradmerge.importance import ImportanceMap
from gradmerge.merge_engine import reason_any_merge
from gradmerge.toy import random_calibration, random_toy_model, toy_importance

GOLDEN_DIR = Path(__file__).parent / "golden"

LIGHT = ExperimentConfig(steps=60, fine_steps=30, train_samples=32, calib_samples=32)


class TestConfig:
    def test_defaults_valid(self):
        cfg = ExperimentConfig()
        assert cfg.injection_ratios == (0.10, 0.05, 0.01)
        assert cfg.p_values == (0.05,)
        assert cfg.lambda_values == (1.0,)

    def test_validation_errors(self):
        with pytest.raises(ValidationError, match="block_a"):
            ExperimentConfig(block_a=12)
        with pytest.raises(ValidationError, match="block_leak"):
            ExperimentConfig(block_leak=1.5)
        with pytest.raises(ValidationError, match="learning_rate"):
            ExperimentConfig(learning_rate=0.0)
        with pytest.raises(ValidationError, match="unknown method"):
            ExperimentConfig(merge_methods=("averaging",))
        with pytest.raises(ValidationError, match="non-empty"):
            ExperimentConfig(p_values=())
        with pytest.raises(ValidationError, match="injection ratio"):
            ExperimentConfig(injection_ratios=(1.5,))
        with pytest.raises(ValidationError, match="seed"):
            ExperimentConfig(seed=-1)

    def test_from_json_round_trip(self):
        cfg = ExperimentConfig(seed=3, hidden_dims=(8, 8), p_values=(0.1, 0.2))
        echo = asdict(cfg)
        again = config_from_json(json.loads(json.dumps(echo)))
        assert again == cfg

    def test_from_json_unknown_key(self):
        with pytest.raises(ValidationError, match="unknown config key 'sede'"):
            config_from_json({"sede": 1})

    def test_from_json_type_errors(self):
        with pytest.raises(ValidationError, match="must be an array"):
            config_from_json({"p_values": 0.5})
        with pytest.raises(ValidationError, match="must be an integer"):
            config_from_json({"steps": "many"})
        with pytest.raises(ValidationError, match="must be an integer"):
            config_from_json({"steps": True})
        with pytest.raises(ValidationError, match="must be a number"):
            config_from_json({"learning_rate": "fast"})


class TestTraining:
    def test_zero_steps_is_identity(self):
        world = build_world(LIGHT)
        model = train_toy_model(world.init, world.mixed_train, 0, 0.05)
        for a, b in zip(model.weights, world.init.weights):
            assert a.tobytes() == b.tobytes()

    def test_training_reduces_loss(self):
        world = build_world(LIGHT)
        before = mean_loss(world.init, world.mixed_train)
        model = train_toy_model(world.init, world.mixed_train, 60, 0.05)
        after = mean_loss(model, world.mixed_train)
        assert after < before

    def test_divergence_reports_step(self):
        world = build_world(LIGHT)
        with pytest.raises(ValidationError, match=r"training diverged at step \d+"):
            train_toy_model(world.init, world.mixed_train, 200, 1e6)

    def test_deterministic(self):
        world = build_world(LIGHT)
        a = train_toy_model(world.init, world.mixed_train, 20, 0.05)
        b = train_toy_model(world.init, world.mixed_train, 20, 0.05)
        for wa, wb in zip(a.weights, b.weights):
            assert wa.tobytes() == wb.tobytes()


class TestAdditiveExperiment:
    def test_full_injection_recovers_specialist_loss_exactly(self):
        cfg = replace(LIGHT, injection_ratios=(1.0,))
        table = run_additive_experiment(cfg)
        for row in table.rows:
            assert row["loss"] == table.references["specialist_loss"]

    def test_zero_injection_keeps_base_loss(self):
        cfg = replace(LIGHT, injection_ratios=(0.0,))
        table = run_additive_experiment(cfg)
        for row in table.rows:
            assert row["loss"] == table.references["base_loss"]
            assert row["delta_loss"] == 0.0

    def test_row_grid_order(self):
        cfg = replace(LIGHT, injection_ratios=(0.1, 0.05))
        table = run_additive_experiment(cfg)
        keys = [(r["p"], r["direction"]) for r in table.rows]
        assert keys == [
            (0.1, "highest"), (0.1, "lowest"),
            (0.05, "highest"), (0.05, "lowest"),
        ]

    def test_delta_loss_is_loss_minus_base(self):
        table = run_additive_experiment(LIGHT)
        for row in table.rows:
            assert row["delta_loss"] == row["loss"] - table.references["base_loss"]

    def test_deterministic(self):
        a = run_additive_experiment(LIGHT)
        b = run_additive_experiment(LIGHT)
        assert a.to_json() == b.to_json()

    def test_constructed_minimal_importance_support(self):
        # Specialist delta lives only on coordinates given zero importance:
        # lowest-direction injection at the matching p recovers the
        # specialist exactly; highest-direction leaves the base untouched.
        rng = np.random.default_rng(91)
        base = random_toy_model(rng, dims=(6, 16, 3))
        calib = random_calibration(rng, base, 12)
        base_map = base.to_weight_map()
        total = sum(a.size for a in base_map.values())
        spec_map = {n: a.copy() for n, a in base_map.items()}
        spec_map["layers.0.bias"][:5] += 2.0**-10
        specialist = base.with_weight_map(spec_map)
        scores = {
            n: np.ones(a.shape, dtype=np.float32) for n, a in base_map.items()
        }
        scores["layers.0.bias"][:5] = 0.0
        importance = ImportanceMap(scores=scores)
        table = injection_table(
            base, specialist, importance, calib, ratios=(5 / total,), scale=1.0
        )
        by_dir = {r["direction"]: r for r in table.rows}
        assert by_dir["lowest"]["loss"] == table.references["specialist_loss"]
        assert by_dir["lowest"]["updated_params"] == 5
        assert by_dir["highest"]["loss"] == table.references["base_loss"]
        assert by_dir["highest"]["updated_params"] == 0

    def test_sensitivity_ordering_small_sweep(self):
        wins = first_order_sensitivity_wins(LIGHT, trials=10)
        for p, count in wins.items():
            assert count >= 9, f"p={p}: {count}/10"


class TestMergeComparison:
    def test_task_arithmetic_lambda_zero_equals_base(self):
        cfg = replace(LIGHT, merge_methods=("task-arithmetic",), lambda_values=(0.0,))
        table = run_merge_comparison(cfg)
        assert len(table.rows) == 1
        row = table.rows[0]
        assert row["loss_a"] == table.references["base_loss_a"]
        assert row["loss_b"] == table.references["base_loss_b"]

    def test_reason_any_full_overlap_equals_base(self):
        cfg = replace(LIGHT, merge_methods=("reason-any",), p_values=(1.0,))
        table = run_merge_comparison(cfg)
        row = table.rows[0]
        assert row["loss_a"] == table.references["base_loss_a"]
        assert row["loss_b"] == table.references["base_loss_b"]

    def test_row_count_matches_grid(self):
        cfg = replace(
            LIGHT,
            merge_methods=("reason-any", "linear", "ties"),
            p_values=(0.05, 0.1),
            lambda_values=(0.5, 1.0),
        )
        table = run_merge_comparison(cfg)
        # reason-any: 2x2, linear: 1, ties: 2
        assert len(table.rows) == 4 + 1 + 2

    def test_deterministic(self):
        a = run_merge_comparison(LIGHT)
        b = run_merge_comparison(LIGHT)
        assert a.to_json() == b.to_json()

    def test_reason_any_cell_matches_direct_engine_call(self):
        cfg = replace(LIGHT, merge_methods=("reason-any",))
        table = run_merge_comparison(cfg)
        row = table.rows[0]

        world = build_world(cfg)
        base = train_toy_model(world.init, world.mixed_train, cfg.steps, cfg.learning_rate)
        expert_a = train_toy_model(base, world.train_a, cfg.fine_steps, cfg.learning_rate)
        expert_b = train_toy_model(base, world.train_b, cfg.fine_steps, cfg.learning_rate)
        out = reason_any_merge(
            base.to_weight_map(), expert_a.to_weight_map(), expert_b.to_weight_map(),
            toy_importance(expert_a, world.calib_a),
            toy_importance(expert_b, world.calib_b),
            p_t=0.05, p_r=0.05, lambda_t=1.0, lambda_r=1.0,
        )
        merged = base.with_weight_map(out.arrays)
        assert row["loss_a"] == mean_loss(merged, world.calib_a)
        assert row["loss_b"] == mean_loss(merged, world.calib_b)

    def test_max_degradation_definition(self):
        table = run_merge_comparison(LIGHT)
        for row in table.rows:
            expected = max(
                row["loss_a"] - table.references["expert_a_loss"],
                row["loss_b"] - table.references["expert_b_loss"],
            )
            assert row["max_degradation"] == expected

    def test_golden_table_seed0(self):
        golden_path = GOLDEN_DIR / "merge_comparison_seed0.json"
        table = run_merge_comparison(ExperimentConfig())
        assert table.to_json() == json.loads(golden_path.read_text())


class TestTableSerialization:
    def test_csv_layout(self):
        table = run_additive_experiment(replace(LIGHT, injection_ratios=(0.1,)))
        lines = table.to_csv().strip().split("\n")
        assert lines[0] == "direction,p,loss,delta_loss,updated_params"
        assert len(lines) == 3

    def test_csv_floats_round_trip(self):
        table = run_additive_experiment(replace(LIGHT, injection_ratios=(0.1,)))
        lines = table.to_csv().strip().split("\n")
        for line, row in zip(lines[1:], table.rows):
            cells = line.split(",")
            assert float(cells[2]) == row["loss"]

    def test_csv_none_is_empty(self):
        cfg = replace(LIGHT, merge_methods=("linear",))
        table = run_merge_comparison(cfg)
        lines = table.to_csv().strip().split("\n")
        assert lines[1].startswith("linear,,")

    def test_json_has_config_echo(self):
        table = run_additive_experiment(LIGHT)
        blob = table.to_json()
        assert blob["config"]["steps"] == 60
        assert blob["kind"] == "additive-injection"
