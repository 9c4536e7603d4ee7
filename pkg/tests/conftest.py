"""Shared fixtures: toy-model checkpoints with calibration and importance files."""

from dataclasses import dataclass

import numpy as np
import pytest

from gradmerge.toy import LOSS_MSE, random_calibration, random_toy_model
from gradmerge.toy_io import save_calibration, save_toy_model
from gradmerge.workflows import importance_op

TRIO_DIMS = (6, 10, 4)


@dataclass(frozen=True)
class Trio:
    """Paths for a base/task/reasoning checkpoint family on disk."""

    base: str
    task: str
    reasoning: str
    calib: str
    task_imp: str
    reasoning_imp: str
    dir: str


@pytest.fixture
def trio(tmp_path):
    rng = np.random.default_rng(1234)
    base = random_toy_model(rng, TRIO_DIMS, LOSS_MSE)
    task = random_toy_model(rng, TRIO_DIMS, LOSS_MSE)
    reasoning = random_toy_model(rng, TRIO_DIMS, LOSS_MSE)
    calib = random_calibration(rng, base, 12, id="trio-calib")

    paths = Trio(
        base=str(tmp_path / "base.ckpt"),
        task=str(tmp_path / "task.ckpt"),
        reasoning=str(tmp_path / "reasoning.ckpt"),
        calib=str(tmp_path / "calib.json"),
        task_imp=str(tmp_path / "task.imp"),
        reasoning_imp=str(tmp_path / "reasoning.imp"),
        dir=str(tmp_path),
    )
    save_toy_model(paths.base, base)
    save_toy_model(paths.task, task)
    save_toy_model(paths.reasoning, reasoning)
    save_calibration(paths.calib, calib)
    importance_op(paths.task, paths.calib, paths.task_imp)
    importance_op(paths.reasoning, paths.calib, paths.reasoning_imp)
    return paths


def reason_any_recipe_for(trio_paths, output, **extra):
    raw = {
        "method": "reason-any",
        "base": trio_paths.base,
        "task_model": trio_paths.task,
        "reasoning_model": trio_paths.reasoning,
        "task_importance": trio_paths.task_imp,
        "reasoning_importance": trio_paths.reasoning_imp,
        "p_t": 0.25,
        "p_r": 0.25,
        "output": output,
    }
    raw.update(extra)
    return raw
