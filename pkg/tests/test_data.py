import gzip
import struct

import numpy as np
import pandas as pd
import pytest

from core.core_module import ContractViolation, IdxFormatError, NonFiniteError
from data.data_module import (IDX_IMAGE_MAGIC, Dataset, concat, gen_two_circles, load_csv, load_idx, read_idx,
                              standardize, subset, write_idx)


class TestDataset:

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            Dataset(np.array([[0.0, np.inf]]))

    def test_label_count_must_match(self):
        with pytest.raises(ContractViolation):
            Dataset(np.zeros((3, 2)), np.array([0, 1]))

    def test_properties(self):
        ds = Dataset(np.zeros((4, 3)), [0, 2, 1, 0])
        assert (ds.size, ds.dim, ds.num_classes) == (4, 3, 3)
        assert Dataset(np.zeros((4, 3))).num_classes is None


class TestTwoCircles:

    def test_noiseless_radii(self):
        ds = gen_two_circles(n_per_class=100, r_inner=1.0, r_outer=2.0, noise_sigma=0.0, seed=3)
        radii = np.linalg.norm(ds.X, axis=1)
        np.testing.assert_allclose(radii[:100], 1.0, atol=1e-12)
        np.testing.assert_allclose(radii[100:], 2.0, atol=1e-12)
        np.testing.assert_array_equal(ds.labels, np.repeat([0, 1], 100))

    def test_seeded(self):
        np.testing.assert_array_equal(gen_two_circles(seed=1).X, gen_two_circles(seed=1).X)
        assert not np.array_equal(gen_two_circles(seed=1).X, gen_two_circles(seed=2).X)

    def test_size(self):
        ds = gen_two_circles(n_per_class=300)
        assert ds.X.shape == (600, 2)

    @pytest.mark.parametrize("kwargs", [{"r_inner": 2.0, "r_outer": 1.0}, {"noise_sigma": -0.1}, {"n_per_class": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ContractViolation):
            gen_two_circles(**kwargs)


class TestIdx:

    @pytest.fixture
    def pair(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(7, 4, 3)).astype(np.uint8)
        labels = rng.integers(0, 10, size=7).astype(np.uint8)
        return images, labels, tmp_path

    @pytest.mark.parametrize("suffix", ["", ".gz"])
    def test_write_then_load(self, pair, suffix):
        images, labels, root = pair
        write_idx(str(root / f"img{suffix}"), images, "images")
        write_idx(str(root / f"lbl{suffix}"), labels, "labels")
        ds = load_idx(str(root / f"img{suffix}"), str(root / f"lbl{suffix}"))
        np.testing.assert_array_equal(ds.X, images.reshape(7, 12).astype(np.float64))
        np.testing.assert_array_equal(ds.labels, labels)

    def test_gzip_is_really_compressed(self, pair):
        images, _, root = pair
        write_idx(str(root / "img.gz"), images, "images")
        with gzip.open(root / "img.gz", "rb") as f:
            assert struct.unpack(">I", f.read(4))[0] == IDX_IMAGE_MAGIC

    def test_bad_magic(self, pair):
        images, labels, root = pair
        write_idx(str(root / "lbl"), labels, "labels")
        with pytest.raises(IdxFormatError) as info:
            read_idx(str(root / "lbl"), IDX_IMAGE_MAGIC)
        assert info.value.offset == 0

    def test_count_mismatch(self, pair):
        images, labels, root = pair
        write_idx(str(root / "img"), images, "images")
        write_idx(str(root / "lbl"), labels[:5], "labels")
        with pytest.raises(IdxFormatError) as info:
            load_idx(str(root / "img"), str(root / "lbl"))
        assert info.value.offset == 4

    def test_truncated_payload(self, pair):
        images, _, root = pair
        write_idx(str(root / "img"), images, "images")
        raw = (root / "img").read_bytes()
        (root / "img").write_bytes(raw[:-10])
        with pytest.raises(IdxFormatError) as info:
            read_idx(str(root / "img"), IDX_IMAGE_MAGIC)
        assert info.value.offset == len(raw) - 10

    def test_write_rejects_wrong_rank(self, tmp_path):
        with pytest.raises(ContractViolation):
            write_idx(str(tmp_path / "x"), np.zeros((2, 2), dtype=np.uint8), "images")


def test_load_csv(tmp_path):
    path = tmp_path / "points.csv"
    pd.DataFrame({"a": [0.0, 1.0, 2.0], "b": [1.0, 1.5, -1.0], "y": [1, 0, 1]}).to_csv(path, index=False)
    ds = load_csv(str(path), label_column="y")
    assert ds.X.shape == (3, 2)
    np.testing.assert_array_equal(ds.labels, [1, 0, 1])
    assert load_csv(str(path)).X.shape == (3, 3)
    with pytest.raises(ContractViolation):
        load_csv(str(path), label_column="missing")


class TestStandardize:

    def test_zero_mean_unit_std(self, rng):
        ds, transform = standardize(Dataset(rng.uniform(0, 255, size=(50, 6))))
        assert ds.X.mean() == pytest.approx(0.0, abs=1e-12)
        assert ds.X.std() == pytest.approx(1.0, abs=1e-12)
        assert transform.std > 0

    def test_applies_train_statistics(self, rng):
        train, transform = standardize(Dataset(rng.normal(3.0, 2.0, size=(40, 2))))
        other = Dataset(np.array([[transform.mean, transform.mean + transform.std]]))
        np.testing.assert_allclose(transform.apply(other).X, [[0.0, 1.0]], atol=1e-12)

    def test_constant_dataset(self):
        with pytest.raises(ContractViolation):
            standardize(Dataset(np.ones((4, 2))))

    def test_is_an_invertible_affine_map(self, rng):
        raw = rng.uniform(0, 255, size=(30, 4))
        ds, transform = standardize(Dataset(raw))
        np.testing.assert_allclose(ds.X * transform.std + transform.mean, raw, rtol=1e-12)
        # convex combinations commute with the map
        w = rng.dirichlet(np.ones(30))
        np.testing.assert_allclose(w @ ds.X, (w @ raw - transform.mean) / transform.std, atol=1e-10)


class TestSubsetAndConcat:

    def test_subset_relabels_in_given_order(self):
        labels = np.repeat(np.arange(4), 10)
        ds = Dataset(np.arange(40, dtype=float)[:, None], labels)
        picked = subset(ds, [3, 1], per_class=4, seed=0)
        np.testing.assert_array_equal(picked.labels, np.repeat([0, 1], 4))
        assert np.all((picked.X[:4, 0] >= 30) & (picked.X[:4, 0] < 40))
        assert np.all((picked.X[4:, 0] >= 10) & (picked.X[4:, 0] < 20))

    def test_subset_is_seeded(self):
        ds = Dataset(np.random.default_rng(0).normal(size=(60, 3)), np.repeat(np.arange(3), 20))
        a = subset(ds, [0, 2], per_class=7, seed=4)
        b = subset(ds, [0, 2], per_class=7, seed=4)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_subset_too_few(self):
        ds = Dataset(np.zeros((4, 1)), [0, 0, 1, 1])
        with pytest.raises(ContractViolation):
            subset(ds, [0, 1], per_class=3)

    def test_concat(self):
        a = Dataset(np.zeros((2, 2)), [0, 1])
        b = Dataset(np.ones((3, 2)), [1, 1, 0])
        both = concat(a, b)
        assert both.size == 5
        np.testing.assert_array_equal(both.labels, [0, 1, 1, 1, 0])
        assert concat(a, Dataset(np.ones((1, 2)))).labels is None
        with pytest.raises(ContractViolation):
            concat(a, Dataset(np.ones((1, 3))))
