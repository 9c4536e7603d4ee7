"""Toy-model checkpoint and calibration JSON round trips and validation."""

import json

import numpy as np
import pytest

from gradmerge.errors import ValidationError
from gradmerge.store import open_checkpoint, write_arrays
from gradmerge.toy import (
    LOSS_CROSS_ENTROPY,
    LOSS_MSE,
    random_calibration,
    random_toy_model,
    toy_forward_loss,
)
from gradmerge.toy_io import (
    first_samples,
    load_calibration,
    load_toy_model,
    model_label,
    save_calibration,
    save_toy_model,
)


def make_model(seed=0, dims=(4, 6, 3), loss=LOSS_MSE):
    return random_toy_model(np.random.default_rng(seed), dims, loss)


class TestToyModelRoundTrip:
    def test_weights_bitwise(self, tmp_path):
        model = make_model()
        path = str(tmp_path / "toy.ckpt")
        save_toy_model(path, model)
        again = load_toy_model(path)
        for a, b in zip(model.weights, again.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(model.biases, again.biases):
            np.testing.assert_array_equal(a, b)
        assert again.activations == model.activations
        assert again.loss == model.loss

    def test_loss_preserved_through_file(self, tmp_path):
        model = make_model(seed=3, loss=LOSS_CROSS_ENTROPY)
        calib = random_calibration(np.random.default_rng(5), model, 8)
        path = str(tmp_path / "toy.ckpt")
        save_toy_model(path, model)
        again = load_toy_model(path)
        for sample in calib.samples:
            assert toy_forward_loss(again, sample) == toy_forward_loss(model, sample)

    def test_accepts_open_checkpoint(self, tmp_path):
        model = make_model()
        path = str(tmp_path / "toy.ckpt")
        save_toy_model(path, model)
        again = load_toy_model(open_checkpoint(path))
        assert again.in_dim == model.in_dim

    def test_metadata_keys(self, tmp_path):
        model = make_model()
        path = str(tmp_path / "toy.ckpt")
        save_toy_model(path, model)
        ckpt = open_checkpoint(path)
        assert ckpt.metadata["toy_loss"] == LOSS_MSE
        assert "," in ckpt.metadata["toy_activations"]

    def test_plain_checkpoint_rejected(self, tmp_path):
        path = str(tmp_path / "plain.ckpt")
        write_arrays(path, {"w": np.zeros(3, dtype=np.float32)})
        with pytest.raises(ValidationError, match="metadata key 'toy_activations' missing"):
            load_toy_model(path)

    def test_missing_tensor(self, tmp_path):
        model = make_model()
        path = str(tmp_path / "toy.ckpt")
        save_toy_model(path, model)
        ckpt = open_checkpoint(path)
        arrays = {name: ckpt.read(name) for name in ckpt.names()}
        del arrays["layers.1.bias"]
        broken = str(tmp_path / "broken.ckpt")
        write_arrays(broken, arrays, metadata=dict(ckpt.metadata))
        with pytest.raises(ValidationError, match="missing tensor 'layers.1.bias'"):
            load_toy_model(broken)

    def test_extra_tensor(self, tmp_path):
        model = make_model()
        path = str(tmp_path / "toy.ckpt")
        save_toy_model(path, model)
        ckpt = open_checkpoint(path)
        arrays = {name: ckpt.read(name) for name in ckpt.names()}
        arrays["stray"] = np.zeros(2)
        broken = str(tmp_path / "broken.ckpt")
        write_arrays(broken, arrays, metadata=dict(ckpt.metadata))
        with pytest.raises(ValidationError, match="unexpected tensor 'stray'"):
            load_toy_model(broken)


class TestCalibrationRoundTrip:
    def test_mse_targets(self, tmp_path):
        model = make_model()
        calib = random_calibration(np.random.default_rng(1), model, 6, id="roundtrip")
        path = str(tmp_path / "calib.json")
        save_calibration(path, calib)
        again = load_calibration(path)
        assert again.id == "roundtrip"
        assert len(again.samples) == 6
        for a, b in zip(calib.samples, again.samples):
            np.testing.assert_array_equal(a.x, b.x)
            np.testing.assert_array_equal(np.asarray(a.y), np.asarray(b.y))

    def test_class_index_targets(self, tmp_path):
        model = make_model(loss=LOSS_CROSS_ENTROPY)
        calib = random_calibration(np.random.default_rng(1), model, 6)
        path = str(tmp_path / "calib.json")
        save_calibration(path, calib)
        again = load_calibration(path)
        for a, b in zip(calib.samples, again.samples):
            assert np.asarray(b.y).shape == ()
            assert int(a.y) == int(b.y)

    def test_unknown_top_key(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text('{"id": "x", "samples": [], "extra": 1}')
        with pytest.raises(ValidationError, match="unknown calibration key 'extra'"):
            load_calibration(str(path))

    def test_id_type(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text('{"id": 4, "samples": []}')
        with pytest.raises(ValidationError, match="'id' must be a string"):
            load_calibration(str(path))

    def test_samples_required(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text('{"id": "x"}')
        with pytest.raises(ValidationError, match="'samples' must be an array"):
            load_calibration(str(path))

    def test_sample_unknown_key(self, tmp_path):
        path = tmp_path / "calib.json"
        doc = {"id": "x", "samples": [{"x": [1.0], "y": 0, "weight": 2}]}
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError, match="unknown calibration sample key 'weight'"):
            load_calibration(str(path))

    def test_sample_needs_x_and_y(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text('{"id": "x", "samples": [{"x": [1.0]}]}')
        with pytest.raises(ValidationError, match="sample 0 needs both 'x' and 'y'"):
            load_calibration(str(path))

    def test_sample_not_object(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text('{"id": "x", "samples": [[1, 2]]}')
        with pytest.raises(ValidationError, match="sample 0 is not an object"):
            load_calibration(str(path))

    def test_bool_target_rejected(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text('{"id": "x", "samples": [{"x": [1.0], "y": true}]}')
        with pytest.raises(ValidationError, match="class index or vector"):
            load_calibration(str(path))

    def test_non_numeric_x(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text('{"id": "x", "samples": [{"x": ["a"], "y": 0}]}')
        with pytest.raises(ValidationError, match="must be an array of numbers"):
            load_calibration(str(path))

    def test_empty_samples_rejected(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text('{"id": "x", "samples": []}')
        with pytest.raises(ValidationError, match="calibration set is empty"):
            load_calibration(str(path))


class TestFirstSamples:
    def test_prefix(self):
        model = make_model()
        calib = random_calibration(np.random.default_rng(1), model, 10)
        capped = first_samples(calib, 4)
        assert capped.samples == calib.samples[:4]
        assert capped.id == calib.id

    def test_cap_beyond_size_is_identity(self):
        model = make_model()
        calib = random_calibration(np.random.default_rng(1), model, 3)
        assert first_samples(calib, 100) is calib

    def test_cap_must_be_positive(self):
        model = make_model()
        calib = random_calibration(np.random.default_rng(1), model, 3)
        with pytest.raises(ValidationError, match="sample cap must be a positive integer"):
            first_samples(calib, 0)


def test_model_label_is_basename():
    assert model_label("/a/b/model.ckpt") == "model.ckpt"
