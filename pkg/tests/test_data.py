import struct

import numpy as np
import pytest

from sqakd.data import (
    BLOB_SIGMA,
    Dataset,
    blob_centers,
    gen_blobs,
    gen_moons,
    gen_synthetic,
    load_idx,
    train_test_split,
)
from sqakd.errors import ConfigError, DataError


def write_idx_images(path, images):
    """Hand-written IDX encoder: big-endian magic + dims, uint8 payload."""
    n, h, w = images.shape
    blob = struct.pack(">iiii", 0x00000803, n, h, w) + images.astype(np.uint8).tobytes()
    path.write_bytes(blob)


def write_idx_labels(path, labels):
    blob = struct.pack(">ii", 0x00000801, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    path.write_bytes(blob)


class TestSynthetic:
    def test_blobs_nearest_center_oracle(self):
        # Centers sit 6 sigma apart for two classes, so classifying each point
        # by its nearest center is essentially error-free.
        ds = gen_blobs(4000, 2, seed=5)
        centers = blob_centers(2)
        dists = np.linalg.norm(ds.x[:, None, :] - centers[None], axis=2)
        predicted = np.argmin(dists, axis=1)
        assert (predicted == ds.y).mean() >= 0.99
        assert np.linalg.norm(centers[0] - centers[1]) >= 6 * BLOB_SIGMA

    def test_blobs_deterministic_in_seed(self):
        a = gen_blobs(300, 3, seed=11)
        b = gen_blobs(300, 3, seed=11)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
        c = gen_blobs(300, 3, seed=12)
        assert not np.array_equal(a.x, c.x)

    def test_blobs_all_classes_present(self):
        ds = gen_blobs(64, 5, seed=0)
        assert set(np.unique(ds.y)) == set(range(5))

    def test_moons_zero_noise_on_half_circles(self):
        ds = gen_moons(200, seed=3, noise=0.0)
        outer = ds.x[ds.y == 0]
        inner = ds.x[ds.y == 1]
        np.testing.assert_allclose(np.linalg.norm(outer, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(
            np.linalg.norm(inner - np.array([1.0, 0.5], dtype=np.float32), axis=1), 1.0, atol=1e-6
        )

    def test_gen_synthetic_dispatch(self):
        assert gen_synthetic("blobs", 50, 2, 0).name == "blobs"
        assert gen_synthetic("moons", 50, 2, 0).name == "moons"
        with pytest.raises(ConfigError):
            gen_synthetic("moons", 50, 3, 0)
        with pytest.raises(ConfigError):
            gen_synthetic("spirals", 50, 2, 0)
        with pytest.raises(ConfigError):
            gen_synthetic("blobs", 2, 5, 0)

    def test_split_is_disjoint_and_deterministic(self):
        ds = gen_blobs(100, 2, seed=0)
        tr1, te1 = train_test_split(ds, 0.25, seed=7)
        tr2, te2 = train_test_split(ds, 0.25, seed=7)
        assert len(tr1) == 75 and len(te1) == 25
        assert np.array_equal(tr1.x, tr2.x) and np.array_equal(te1.x, te2.x)

    def test_without_labels(self):
        ds = gen_blobs(10, 2, seed=0).without_labels()
        assert ds.y is None and not ds.has_labels


class TestIdx:
    def test_fixture_roundtrip(self, tmp_path):
        images = np.arange(16, dtype=np.uint8).reshape(4, 2, 2)
        labels = np.array([0, 1, 1, 0])
        write_idx_images(tmp_path / "images.idx", images)
        write_idx_labels(tmp_path / "labels.idx", labels)
        ds = load_idx(str(tmp_path / "images.idx"), str(tmp_path / "labels.idx"))
        assert ds.x.shape == (4, 1, 2, 2)
        assert ds.x.dtype == np.float32
        np.testing.assert_allclose(ds.x.reshape(4, 4)[1], images[1].reshape(4) / 255.0, atol=1e-7)
        assert np.array_equal(ds.y, labels)
        assert ds.n_classes == 2

    def test_images_without_labels(self, tmp_path):
        write_idx_images(tmp_path / "images.idx", np.zeros((3, 2, 2), dtype=np.uint8))
        ds = load_idx(str(tmp_path / "images.idx"))
        assert ds.y is None and len(ds) == 3

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(struct.pack(">iiii", 0x00000801, 1, 2, 2) + b"\x00" * 4)
        with pytest.raises(DataError, match="magic"):
            load_idx(str(path))

    def test_label_file_with_image_magic_rejected(self, tmp_path):
        write_idx_images(tmp_path / "images.idx", np.zeros((1, 2, 2), dtype=np.uint8))
        bad_labels = tmp_path / "labels.idx"
        bad_labels.write_bytes(struct.pack(">iiii", 0x00000803, 1, 1, 1) + b"\x00")
        with pytest.raises(DataError, match="magic"):
            load_idx(str(tmp_path / "images.idx"), str(bad_labels))

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(struct.pack(">iiii", 0x00000803, 2, 2, 2) + b"\x00" * 3)
        with pytest.raises(DataError, match="payload"):
            load_idx(str(path))

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.idx"
        path.write_bytes(b"")
        with pytest.raises(DataError, match="truncated"):
            load_idx(str(path))

    def test_count_mismatch_rejected(self, tmp_path):
        write_idx_images(tmp_path / "images.idx", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx_labels(tmp_path / "labels.idx", np.zeros(2, dtype=np.uint8))
        with pytest.raises(DataError, match="mismatch"):
            load_idx(str(tmp_path / "images.idx"), str(tmp_path / "labels.idx"))


class TestDataset:
    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 2), dtype=np.float32), np.zeros(2, dtype=np.int64), 2)

    def test_subset(self):
        ds = gen_blobs(20, 2, seed=0)
        sub = ds.subset(np.arange(5))
        assert len(sub) == 5 and sub.n_classes == 2
