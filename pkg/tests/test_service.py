"""HTTP service: routes delegate to operations, errors map to 400 + category."""

import json
import os

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import reason_any_recipe_for
from gradmerge.service import create_app
from gradmerge.store import open_checkpoint, write_arrays


@pytest.fixture
def client():
    return TestClient(create_app())


class TestHealth:
    def test_health(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok"}

    def test_unknown_route(self, client):
        assert client.post("/v1/unknown", json={}).status_code == 404


class TestMergeRoute:
    def test_merge_writes_output(self, client, trio, tmp_path):
        out = str(tmp_path / "merged.ckpt")
        resp = client.post(
            "/v1/merge", json={"recipe": reason_any_recipe_for(trio, out)}
        )
        assert resp.status_code == 200
        doc = resp.json()
        assert doc["output"] == out
        assert os.path.exists(out)
        assert doc["report"]["method"] == "reason-any"

    def test_overrides_apply(self, client, trio, tmp_path):
        out = str(tmp_path / "merged.ckpt")
        resp = client.post(
            "/v1/merge",
            json={
                "recipe": reason_any_recipe_for(trio, str(tmp_path / "ignored.ckpt")),
                "overrides": {"output": out},
            },
        )
        assert resp.status_code == 200
        assert os.path.exists(out)

    def test_validation_error_category(self, client, trio, tmp_path):
        recipe = reason_any_recipe_for(trio, str(tmp_path / "x.ckpt"), p_t=2.0)
        resp = client.post("/v1/merge", json={"recipe": recipe})
        assert resp.status_code == 400
        doc = resp.json()
        assert doc["category"] == "validation"
        assert "p_t" in doc["message"]

    def test_io_error_category(self, client, trio, tmp_path):
        recipe = reason_any_recipe_for(trio, str(tmp_path / "x.ckpt"))
        recipe["base"] = str(tmp_path / "missing.ckpt")
        resp = client.post("/v1/merge", json={"recipe": recipe})
        assert resp.status_code == 400
        assert resp.json()["category"] == "io"

    def test_format_error_category(self, client, trio, tmp_path):
        corrupt = str(tmp_path / "corrupt.ckpt")
        with open(corrupt, "wb") as fh:
            fh.write(b"\x00")
        recipe = reason_any_recipe_for(trio, str(tmp_path / "x.ckpt"))
        recipe["base"] = corrupt
        resp = client.post("/v1/merge", json={"recipe": recipe})
        assert resp.status_code == 400
        assert resp.json()["category"] == "format"

    def test_request_shape_enforced(self, client):
        resp = client.post("/v1/merge", json={"recipe": "not an object"})
        assert resp.status_code == 422


class TestImportanceRoute:
    def test_importance(self, client, trio, tmp_path):
        out = str(tmp_path / "svc.imp")
        resp = client.post(
            "/v1/importance",
            json={"model": trio.task, "calib": trio.calib, "out": out, "samples": 6},
        )
        assert resp.status_code == 200
        doc = resp.json()
        assert doc["sample_count"] == 6
        assert os.path.exists(out)


class TestSpectralRoute:
    def test_spectral(self, client, tmp_path):
        rng = np.random.default_rng(2)
        arrays = {
            f"model.layers.{layer}.self_attn.{kind}_proj.weight":
                rng.standard_normal((6, 5)).astype(np.float32)
            for layer in range(2)
            for kind in ("q", "k", "v", "o")
        }
        grads = str(tmp_path / "grads.ckpt")
        write_arrays(grads, arrays)
        out = str(tmp_path / "spectral.json")
        resp = client.post("/v1/spectral", json={"grads": grads, "out": out})
        assert resp.status_code == 200
        assert len(resp.json()["report"]["entries"]) == 8
        assert json.load(open(out)) == resp.json()["report"]


class TestInjectRoute:
    def test_inject_with_lambda_alias(self, client, trio, tmp_path):
        out = str(tmp_path / "inj.ckpt")
        resp = client.post(
            "/v1/inject",
            json={
                "base": trio.base,
                "donor": trio.task,
                "importance": trio.task_imp,
                "p": 0.5,
                "direction": "lowest",
                "output": out,
                "lambda": 0.5,
            },
        )
        assert resp.status_code == 200
        assert resp.json()["report"]["params"]["lambda"] == 0.5
        assert os.path.exists(out)

    def test_inline_importance_source(self, client, trio, tmp_path):
        out = str(tmp_path / "inj.ckpt")
        resp = client.post(
            "/v1/inject",
            json={
                "base": trio.base,
                "donor": trio.task,
                "importance": {"toy_model": trio.task, "calibration": trio.calib},
                "p": 0.25,
                "direction": "highest",
                "output": out,
            },
        )
        assert resp.status_code == 200
        assert os.path.exists(out)


class TestInspectRoute:
    def test_inspect(self, client, trio):
        resp = client.post("/v1/inspect", json={"checkpoint": trio.base})
        assert resp.status_code == 200
        doc = resp.json()
        assert doc["tensor_count"] == 4
        assert doc["metadata"]["toy_loss"] == "mse"

    def test_missing_file(self, client, tmp_path):
        resp = client.post(
            "/v1/inspect", json={"checkpoint": str(tmp_path / "nope.ckpt")}
        )
        assert resp.status_code == 400
        assert resp.json()["category"] == "io"


class TestExperimentRoute:
    def test_experiment(self, client, tmp_path):
        config = {
            "seed": 3,
            "input_dim": 5,
            "hidden_dims": [8],
            "output_dim": 3,
            "block_a": 2,
            "train_samples": 16,
            "calib_samples": 16,
            "steps": 20,
            "fine_steps": 8,
            "injection_ratios": [0.1],
            "p_values": [0.1],
            "lambda_values": [1.0],
        }
        out_dir = str(tmp_path / "exp")
        resp = client.post(
            "/v1/experiment",
            json={"config": config, "kind": "additive", "out_dir": out_dir},
        )
        assert resp.status_code == 200
        assert set(os.listdir(out_dir)) == {"additive.json", "additive.csv"}
        rows = resp.json()["tables"]["additive"]["rows"]
        assert {row["direction"] for row in rows} == {"highest", "lowest"}


def test_merged_output_loads(client_factory=None, tmp_path=None):
    # standalone guard: creating the app twice must not share mutable state
    a = create_app()
    b = create_app()
    assert a is not b
