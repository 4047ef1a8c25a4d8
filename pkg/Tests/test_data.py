"""
Tests for datasets, CSV I/O, normalization, synthetic coupled data and the
checkpoint container.
"""

import json
import struct

import numpy as np
import pytest

from coupler.data import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    Normalizer,
    SyntheticSpec,
    TabularDataset,
    fit_normalizer,
    load_checkpoint,
    load_csv,
    rotation,
    save_checkpoint,
    split_dataset,
    synth_coupled,
    write_csv,
)
from coupler.errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DataError,
    UsageError,
)


class TestCsv:
    """Reading and writing tabular data."""

    def test_reads_features_and_labels(self, tmp_path):
        path = tmp_path / "cells.csv"
        path.write_text("a,Label,b,sublabel\n1.5,2,-3,7\n0,1,4e-2,8\n", encoding="utf-8")
        ds = load_csv(path)
        np.testing.assert_array_equal(ds.points, [[1.5, -3.0], [0.0, 0.04]])
        np.testing.assert_array_equal(ds.labels, [2, 1])
        np.testing.assert_array_equal(ds.sublabels, [7, 8])
        assert ds.columns == ["a", "b"] and ds.name == "cells"

    def test_skips_blank_lines(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x\n1\n\n2\n", encoding="utf-8")
        np.testing.assert_array_equal(load_csv(path).points, [[1.0], [2.0]])

    @pytest.mark.parametrize("content,message", [
        ("", "header"),
        ("x,y\n1,2\n3\n", "line 3"),
        ("x,y\n1,abc\n", "line 2"),
        ("x\nnan\n", "not finite"),
        ("x,label\n1,0.5\n", "integer label"),
    ])
    def test_malformed_files(self, tmp_path, content, message):
        path = tmp_path / "bad.csv"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(DataError, match=message):
            load_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "absent.csv")

    def test_write_then_read_is_exact(self, tmp_path, rng):
        ds = TabularDataset(rng.normal(size=(5, 3)), labels=[0, 1, 0, 2, 1], columns=["p", "q", "r"])
        write_csv(tmp_path / "out" / "d.csv", ds)
        again = load_csv(tmp_path / "out" / "d.csv")
        np.testing.assert_array_equal(again.points, ds.points)
        np.testing.assert_array_equal(again.labels, ds.labels)
        assert again.columns == ["p", "q", "r"]


class TestDataset:
    """In-memory dataset validation and splitting."""

    @pytest.mark.parametrize("points,kwargs", [
        (np.zeros(3), {}),
        (np.array([[1.0, np.inf]]), {}),
        (np.zeros((2, 1)), {"labels": [0, 1, 2]}),
    ])
    def test_rejects_bad_input(self, points, kwargs):
        with pytest.raises(DataError):
            TabularDataset(points, **kwargs)

    def test_require_rows(self):
        with pytest.raises(DataError, match="at least 2"):
            TabularDataset(np.zeros((1, 2)), name="tiny").require_rows(2)

    def test_split_is_deterministic_and_disjoint(self):
        ds = TabularDataset(np.arange(20.0)[:, None])
        train, test = split_dataset(ds, 0.25, seed=3)
        again, _ = split_dataset(ds, 0.25, seed=3)
        assert (train.n, test.n) == (15, 5)
        np.testing.assert_array_equal(train.points, again.points)
        assert set(train.points[:, 0]).isdisjoint(test.points[:, 0])

    def test_split_fraction_range(self):
        with pytest.raises(UsageError):
            split_dataset(TabularDataset(np.zeros((4, 1))), 1.0, seed=0)


class TestNormalizer:
    """Standardization with clamping."""

    def test_fit_apply_invert(self, rng):
        points = rng.normal(3.0, 2.0, size=(500, 2))
        normalizer = fit_normalizer(points)
        z = normalizer.apply(points)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(normalizer.invert(z), points, atol=1e-12)

    def test_outliers_clamped(self):
        normalizer = Normalizer(np.zeros(1), np.ones(1), clip_sigmas=5.0)
        np.testing.assert_array_equal(normalizer.apply(np.array([[10.0], [-10.0], [1.0]])), [[5.0], [-5.0], [1.0]])

    def test_constant_feature(self):
        with pytest.raises(DataError, match="feature 1"):
            fit_normalizer(np.array([[1.0, 2.0], [3.0, 2.0]]))

    def test_needs_two_rows(self):
        with pytest.raises(DataError):
            fit_normalizer(np.zeros((1, 2)))

    def test_round_trips_through_dict(self):
        normalizer = Normalizer(np.array([0.1, 0.2]), np.array([3.0, 0.7]), 4.0)
        again = Normalizer.from_dict(normalizer.to_dict())
        np.testing.assert_array_equal(again.mean, normalizer.mean)
        assert again.clip_sigmas == 4.0


class TestSynthetic:
    """Coupled synthetic datasets with known correspondence."""

    def test_rotation_correspondence(self):
        pair = synth_coupled(SyntheticSpec(n_samples=200, angle_deg=90.0, seed=1))
        rotated = pair.x.points @ rotation(90.0).T
        np.testing.assert_allclose(pair.y.points[pair.correspondence], rotated, atol=1e-12)
        np.testing.assert_array_equal(pair.y.labels[pair.correspondence], pair.labels)

    def test_identity_map_without_shuffle(self):
        spec = SyntheticSpec(generator="linear_map", n_samples=50, dim=3, weight=np.eye(3).tolist(), shuffle=False)
        pair = synth_coupled(spec)
        np.testing.assert_array_equal(pair.x.points, pair.y.points)
        np.testing.assert_array_equal(pair.correspondence, np.arange(50))

    def test_checkerboard_maps_dark_to_dark(self):
        pair = synth_coupled(SyntheticSpec(generator="checkerboard", n_samples=300, seed=2))
        cells = np.floor(pair.y.points + 2.0).astype(int)
        assert np.all((cells.sum(axis=1) % 2) == 0)
        np.testing.assert_allclose(pair.y.points[pair.correspondence], -pair.x.points)

    def test_same_seed_same_data(self):
        a = synth_coupled(SyntheticSpec(n_samples=30, noise=0.1, seed=5))
        b = synth_coupled(SyntheticSpec(n_samples=30, noise=0.1, seed=5))
        np.testing.assert_array_equal(a.x.points, b.x.points)
        np.testing.assert_array_equal(a.y.points, b.y.points)

    @pytest.mark.parametrize("kwargs", [
        {"generator": "spiral"},
        {"n_samples": 0},
        {"separation": 2.0},
        {"generator": "gmm_rotate", "dim": 3},
        {"generator": "linear_map", "dim": 2, "weight": [[1.0]]},
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(UsageError):
            SyntheticSpec(**kwargs)


class TestCheckpointFile:
    """Binary checkpoint container."""

    @staticmethod
    def _checkpoint():
        return Checkpoint(
            metadata={"role": "anchor", "step": 3},
            blocks={"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5])},
            ema_blocks={"w": np.ones((2, 3)), "b": np.zeros(1)},
        )

    def test_round_trip(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", self._checkpoint())
        loaded = load_checkpoint(tmp_path / "c.ckpt")
        assert loaded.metadata == {"role": "anchor", "step": 3}
        np.testing.assert_array_equal(loaded.blocks["w"], np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(loaded.ema_blocks["w"], np.ones((2, 3)))
        assert loaded.optimizer_blocks is None

    def test_identical_inputs_identical_bytes(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", self._checkpoint())
        save_checkpoint(tmp_path / "b.ckpt", self._checkpoint())
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACHECKPOINT")
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(path)

    @pytest.mark.parametrize("keep", [3, len(MAGIC) + 2, 40, -1])
    def test_truncated(self, tmp_path, keep):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, self._checkpoint())
        raw = path.read_bytes()
        path.write_bytes(raw[:keep])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, self._checkpoint())
        raw = bytearray(path.read_bytes())
        raw[len(MAGIC)] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, self._checkpoint())
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DataError, match="trailing"):
            load_checkpoint(path)

    @pytest.mark.parametrize("document", [
        {"metadata": {}},
        {"blocks": []},
        {"metadata": {}, "blocks": [{"name": "w", "section": "params"}]},
        {"metadata": {}, "blocks": [{"name": "w", "section": "params", "shape": ["two"]}]},
        ["not", "a", "mapping"],
    ])
    def test_malformed_metadata_document(self, tmp_path, document):
        header = json.dumps(document).encode("utf-8")
        path = tmp_path / "c.ckpt"
        path.write_bytes(MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(header)) + header)
        with pytest.raises(CheckpointError, match="malformed"):
            load_checkpoint(path)
