import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from projpost.dataflow import (
    Dataset,
    gen_ood_blob,
    gen_toy_regression,
    gen_two_moons,
    idx_dataset,
    load_csv,
    load_idx,
    partition,
    rotate_square_images,
    write_idx,
)
from projpost.errors import ConfigError, DataFormatError


def brute_force_rotation(img, degrees):
    """Pixel-by-pixel nearest-neighbour inverse map, written with plain loops."""
    W = img.shape[0]
    c = (W - 1) / 2
    th = math.radians(degrees)
    out = np.zeros_like(img)
    for r in range(W):
        for q in range(W):
            sr = round(c + math.cos(th) * (r - c) - math.sin(th) * (q - c))
            sq = round(c + math.sin(th) * (r - c) + math.cos(th) * (q - c))
            if 0 <= sr < W and 0 <= sq < W:
                out[r, q] = img[sr, sq]
    return out


class TestDataset:
    def test_regression_targets_become_columns(self):
        ds = Dataset(np.zeros((3, 2)), np.arange(3.0), "regression")
        assert ds.targets.shape == (3, 1) and ds.output_dim == 1 and len(ds) == 3

    def test_rejects_bad_labels_and_values(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((2, 2)), np.array([0, 2]), "classification", n_classes=2)
        with pytest.raises(DataFormatError):
            Dataset(np.array([[np.nan, 0.0]]), np.array([0.0]), "regression")
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((0, 2)), np.zeros(0), "regression")
        with pytest.raises(ConfigError):
            Dataset(np.zeros((1, 2)), np.zeros(1), "ranking")


class TestGenerators:
    def test_toy_zero_noise_is_exact_sine(self):
        ds = gen_toy_regression(25, 0.0, 3)
        np.testing.assert_array_equal(ds.targets[:, 0], np.sin(3 * ds.inputs[:, 0]))

    def test_toy_has_a_gap(self):
        x = gen_toy_regression(500, 0.1, 1).inputs[:, 0]
        assert not np.any((x > -0.4) & (x < 0.4))
        assert x.min() >= -1 and x.max() <= 1

    @pytest.mark.parametrize("gen,args", [(gen_toy_regression, (10, 0.1)), (gen_two_moons, (11, 0.1)),
                                          (gen_ood_blob, (10, (1.0, 2.0), 0.5))])
    def test_deterministic(self, gen, args):
        a, b = gen(*args, seed=4), gen(*args, seed=4)
        assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)

    def test_moons_first_point(self):
        ds = gen_two_moons(10, 0.0, 0)
        np.testing.assert_array_equal(ds.inputs[0], [1.0, 0.0])
        assert ds.targets[0] == 0

    @pytest.mark.parametrize("n", [2, 7, 10])
    def test_moons_class_counts(self, n):
        y = gen_two_moons(n, 0.2, 0).targets
        assert np.sum(y == 0) == math.ceil(n / 2) and np.sum(y == 1) == n // 2

    def test_blob_zero_sd(self):
        ds = gen_ood_blob(5, (10.0, 10.0), 0.0, 0)
        assert np.all(ds.inputs == 10.0)

    def test_blob_mean(self):
        ds = gen_ood_blob(10_000, (10.0, -3.0), 2.0, 7)
        assert np.all(np.abs(ds.inputs.mean(axis=0) - [10.0, -3.0]) <= 3 * 2.0 / 100)


class TestIdx:
    def test_three_dimensional(self, tmp_path):
        p = tmp_path / "a.idx"
        p.write_bytes(bytes([0, 0, 8, 3]) + struct.pack(">3I", 2, 2, 2) + bytes(range(8)))
        arr = load_idx(p)
        assert arr.shape == (2, 2, 2) and arr.dtype == np.uint8 and arr[1, 1, 1] == 7

    def test_labels(self, tmp_path):
        p = tmp_path / "l.idx"
        p.write_bytes(bytes([0, 0, 8, 1]) + struct.pack(">I", 3) + bytes([4, 5, 6]))
        np.testing.assert_array_equal(load_idx(p), [4, 5, 6])

    @pytest.mark.parametrize("data", [
        bytes([0, 0, 8, 1]) + struct.pack(">I", 3) + bytes([4, 5]),  # truncated payload
        bytes([0, 0, 8, 2]) + struct.pack(">I", 3),  # truncated dims
        bytes([1, 0, 8, 1]) + struct.pack(">I", 1) + bytes([0]),  # bad magic
        bytes([0, 0, 0x0D, 1]) + struct.pack(">I", 1) + bytes(4),  # float payload
        bytes([0, 0]),
    ])
    def test_malformed(self, tmp_path, data):
        p = tmp_path / "bad.idx"
        p.write_bytes(data)
        with pytest.raises(DataFormatError):
            load_idx(p)

    def test_round_trip_and_dataset(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, (6, 3, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, 6).astype(np.uint8)
        write_idx(tmp_path / "i.idx", images)
        write_idx(tmp_path / "l.idx", labels)
        assert np.array_equal(load_idx(tmp_path / "i.idx"), images)
        ds = idx_dataset(tmp_path / "i.idx", tmp_path / "l.idx", limit=2, offset=3)
        np.testing.assert_array_equal(ds.inputs, images[3:5].reshape(2, 9) / 255.0)
        np.testing.assert_array_equal(ds.targets, labels[3:5])


class TestCsv:
    def test_regression(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,3\n4,5,6\n")
        ds = load_csv(p, 2, 1, "regression")
        np.testing.assert_array_equal(ds.inputs, [[1, 2], [4, 5]])
        np.testing.assert_array_equal(ds.targets, [[3], [6]])

    def test_classification(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("0.5,1\n-0.5,0\n")
        ds = load_csv(p, 1, 3, "classification")
        assert ds.n_classes == 3 and list(ds.targets) == [1, 0]

    @pytest.mark.parametrize("text", ["", "1,2,nan\n", "1,2\n", "1,2,x\n", "1,2,3\n4,5\n"])
    def test_malformed(self, tmp_path, text):
        p = tmp_path / "bad.csv"
        p.write_text(text)
        with pytest.raises(DataFormatError):
            load_csv(p, 2, 1, "regression")


class TestRotation:
    def _images(self, W, n=3, seed=0):
        X = np.random.default_rng(seed).random((n, W * W))
        return Dataset(X, np.zeros(n, dtype=np.int64), "classification", n_classes=1)

    def test_zero_degrees_is_identity(self):
        ds = self._images(5)
        assert rotate_square_images(ds, 0) is ds

    def test_half_turn_twice(self):
        ds = self._images(5)
        twice = rotate_square_images(rotate_square_images(ds, 180), 180)
        np.testing.assert_array_equal(twice.inputs, ds.inputs)

    @pytest.mark.parametrize("degrees", [30, 90, 180, 217])
    def test_matches_brute_force(self, degrees):
        ds = self._images(5)
        out = rotate_square_images(ds, degrees).inputs
        for img, rot in zip(ds.inputs, out):
            np.testing.assert_array_equal(rot.reshape(5, 5), brute_force_rotation(img.reshape(5, 5), degrees))

    @settings(max_examples=20, deadline=None)
    @given(degrees=st.floats(-360, 360, allow_nan=False))
    def test_centre_pixel_is_fixed(self, degrees):
        X = np.zeros((1, 25))
        X[0, 12] = 1.0
        ds = Dataset(X, np.zeros(1, dtype=np.int64), "classification", n_classes=1)
        out = rotate_square_images(ds, degrees).inputs
        assert out[0, 12] == 1.0 and out.sum() == 1.0

    def test_non_square(self):
        with pytest.raises(ConfigError):
            rotate_square_images(Dataset(np.zeros((1, 5)), np.zeros(1), "regression"), 10)


class TestPartition:
    def test_sizes(self):
        part = partition(5, 2, 0)
        assert sorted(len(b) for b in part.index_lists) == [1, 2, 2]

    @settings(max_examples=30, deadline=None)
    @given(N=st.integers(1, 60), S=st.integers(1, 20), seed=st.integers(0, 99))
    def test_disjoint_cover(self, N, S, seed):
        part = partition(N, S, seed)
        flat = np.concatenate(part.index_lists)
        assert sorted(flat.tolist()) == list(range(N))
        assert all(len(b) <= S for b in part.index_lists)
        again = partition(N, S, seed)
        assert all(np.array_equal(a, b) for a, b in zip(part.index_lists, again.index_lists))

    def test_invalid(self):
        with pytest.raises(ConfigError):
            partition(5, 0, 0)
