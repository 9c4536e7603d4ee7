"""Compatibility report tests."""

import numpy as np
import pytest

from gradmerge.compat import validate_compatibility
from gradmerge.store import open_checkpoint, write_arrays


def _maps(shape_b=(3,)):
    a = {
        "emb": np.zeros((4, 2), dtype=np.float32),
        "w": np.ones((2, 2), dtype=np.float32),
        "b": np.zeros(shape_b, dtype=np.float32),
    }
    b = {
        "emb": np.ones((4, 2), dtype=np.float32),
        "w": np.full((2, 2), 2.0, dtype=np.float32),
        "b": np.ones(3, dtype=np.float32),
    }
    return a, b


class TestValidateCompatibility:
    def test_identical_checkpoints_share_everything(self):
        a, b = _maps()
        report = validate_compatibility([a, b])
        assert report.shared == ("b", "emb", "w")
        assert report.skipped == {}
        assert report.eligible_param_count == 8 + 4 + 3

    def test_shape_mismatch_is_skipped_with_reason(self):
        a, b = _maps(shape_b=(4,))
        report = validate_compatibility([a, b])
        assert report.shared == ("emb", "w")
        assert "shape-mismatch" in report.skipped["b"]

    def test_missing_name_is_skipped(self):
        a, b = _maps()
        del b["emb"]
        report = validate_compatibility([a, b])
        assert report.shared == ("b", "w")
        assert report.skipped["emb"].startswith("missing in")

    def test_exclude_pattern_filters(self):
        a = {"layer.0.weight": np.ones(2, dtype=np.float32), "layer.0.bias": np.ones(2, dtype=np.float32)}
        b = {"layer.0.weight": np.ones(2, dtype=np.float32), "layer.0.bias": np.ones(2, dtype=np.float32)}
        report = validate_compatibility([a, b], exclude_patterns=["*.bias"])
        assert report.shared == ("layer.0.weight",)
        assert report.skipped["layer.0.bias"] == "filtered"

    def test_include_pattern_keeps_only_matches(self):
        a, b = _maps()
        report = validate_compatibility([a, b], include_patterns=["w"])
        assert report.shared == ("w",)
        assert report.skipped["b"] == "filtered"
        assert report.skipped["emb"] == "filtered"

    def test_integer_tensor_not_eligible(self):
        a = {"w": np.ones(2, dtype=np.float32), "steps": np.array([3], dtype=np.int64)}
        b = {"w": np.ones(2, dtype=np.float32), "steps": np.array([4], dtype=np.int64)}
        report = validate_compatibility([a, b])
        assert report.shared == ("w",)
        assert "non-float" in report.skipped["steps"]

    def test_order_insensitive_shared_set(self):
        a, b = _maps(shape_b=(4,))
        forward = validate_compatibility([a, b])
        backward = validate_compatibility([b, a])
        assert forward.shared == backward.shared
        assert set(forward.skipped) == set(backward.skipped)
        assert forward.eligible_param_count == backward.eligible_param_count

    def test_eligible_count_matches_independent_sum(self):
        rng = np.random.default_rng(0)
        a = {f"t{i}": rng.normal(size=(i + 1, 2)).astype(np.float32) for i in range(5)}
        b = {n: v.copy() for n, v in a.items()}
        report = validate_compatibility([a, b])
        assert report.eligible_param_count == sum(v.size for v in a.values())

    def test_three_way_intersection(self):
        a, b = _maps()
        c = {"w": np.ones((2, 2), dtype=np.float32)}
        report = validate_compatibility([a, b, c])
        assert report.shared == ("w",)

    def test_works_on_lazy_checkpoints(self, tmp_path):
        a, b = _maps()
        pa, pb = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        write_arrays(pa, a)
        write_arrays(pb, b)
        ca, cb = open_checkpoint(pa), open_checkpoint(pb)
        report = validate_compatibility([ca, cb])
        assert report.shared == ("b", "emb", "w")
        # Metadata only: compatibility must not read any tensor payload.
        assert ca.bytes_read < 4096 and cb.bytes_read < 4096

    def test_fewer_than_two_maps_rejected(self):
        with pytest.raises(ValueError):
            validate_compatibility([{"w": np.ones(1, dtype=np.float32)}])
