from __future__ import annotations

import numpy as np
import pytest

from backx.data import (
    ImageBatch,
    apply_normalization,
    invert_normalization,
    load_dataset,
    synthesize_dataset,
)
from backx.errors import IngestionError, InputError, InputShapeError


def _ones_batch(n=3, shape=(3, 4, 4)):
    return ImageBatch(np.ones((n,) + shape, np.float32),
                      np.zeros(n, np.int64), np.arange(n))


class TestImageBatch:
    def test_shape_validation(self):
        with pytest.raises(InputShapeError):
            ImageBatch(np.ones((3, 4, 4), np.float32), np.zeros(3), np.arange(3))

    def test_range_validation(self):
        bad = np.full((2, 3, 4, 4), 1.5, np.float32)
        with pytest.raises(InputError):
            ImageBatch(bad, np.zeros(2), np.arange(2))

    def test_nonfinite_rejected(self):
        bad = np.ones((2, 3, 4, 4), np.float32)
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(InputError):
            ImageBatch(bad, np.zeros(2), np.arange(2))

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            ImageBatch(np.ones((2, 3, 4, 4), np.float32), np.zeros(3), np.arange(2))

    def test_select_keeps_alignment(self):
        batch = _ones_batch(5)
        batch.labels[:] = np.arange(5)
        sub = batch.select([4, 1])
        assert sub.labels.tolist() == [4, 1]
        assert sub.indices.tolist() == [4, 1]

    def test_minibatch_stream_deterministic(self):
        batch = _ones_batch(10)
        a = [mb.indices.tolist() for mb in batch.iter_minibatches(3, seed=5)]
        b = [mb.indices.tolist() for mb in batch.iter_minibatches(3, seed=5)]
        assert a == b
        flat = [i for mb in a for i in mb]
        assert sorted(flat) == list(range(10))


class TestSynthetic:
    def test_counts(self):
        ds = synthesize_dataset(4, 500, 32, seed=0)
        assert len(ds.train) == 2000
        assert ds.num_classes == 4
        assert ds.train.image_shape == (3, 32, 32)

    def test_deterministic_pixels(self):
        a = synthesize_dataset(3, 10, 16, seed=42)
        b = synthesize_dataset(3, 10, 16, seed=42)
        assert a.train.checksum() == b.train.checksum()
        assert a.test.checksum() == b.test.checksum()

    def test_seed_changes_pixels(self):
        a = synthesize_dataset(3, 10, 16, seed=1)
        b = synthesize_dataset(3, 10, 16, seed=2)
        assert a.train.checksum() != b.train.checksum()

    def test_split_disjoint_indices(self):
        ds = synthesize_dataset(4, 20, 16, seed=0)
        assert not set(ds.train.indices) & set(ds.test.indices)

    def test_lazy_stream_equivalence(self):
        ds = synthesize_dataset(3, 10, 16, seed=9)
        first = ds.split("train")
        second = ds.split("train")
        assert first.checksum() == second.checksum()
        assert np.array_equal(first.indices, second.indices)

    def test_too_few_samples_rejected(self):
        with pytest.raises(InputError):
            synthesize_dataset(4, 1, 16, seed=0)

    def test_linear_probe_separates_two_classes(self):
        # least-squares probe on raw pixels as the separability oracle
        ds = synthesize_dataset(2, 50, 16, seed=3)
        x = ds.train.pixels.reshape(len(ds.train), -1).astype(np.float64)
        y = np.where(ds.train.labels == 0, -1.0, 1.0)
        w, *_ = np.linalg.lstsq(np.c_[x, np.ones(len(x))], y, rcond=None)
        xt = ds.test.pixels.reshape(len(ds.test), -1)
        pred = np.where(np.c_[xt, np.ones(len(xt))] @ w < 0, 0, 1)
        assert (pred == ds.test.labels).mean() == 1.0

    def test_linear_probe_sweep(self):
        # every desk configuration keeps classes nearly linearly separable
        for num_classes, size in ((4, 16), (6, 24), (10, 16)):
            ds = synthesize_dataset(num_classes, 30, size, seed=11)
            x = ds.train.pixels.reshape(len(ds.train), -1).astype(np.float64)
            onehot = np.eye(num_classes)[ds.train.labels]
            w, *_ = np.linalg.lstsq(np.c_[x, np.ones(len(x))], onehot, rcond=None)
            xt = ds.test.pixels.reshape(len(ds.test), -1)
            pred = (np.c_[xt, np.ones(len(xt))] @ w).argmax(axis=1)
            acc = (pred == ds.test.labels).mean()
            assert acc >= 0.95, (num_classes, size, acc)


class TestNormalization:
    def test_identity(self):
        pix = np.random.default_rng(0).uniform(0, 1, (2, 3, 4, 4)).astype(np.float32)
        norm = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        assert np.array_equal(apply_normalization(pix, norm), pix)

    def test_round_trip(self):
        pix = np.random.default_rng(1).uniform(0, 1, (2, 3, 4, 4)).astype(np.float32)
        norm = ((0.4914, 0.4822, 0.4465), (0.247, 0.2435, 0.2616))
        back = invert_normalization(apply_normalization(pix, norm), norm)
        assert np.allclose(back, pix, atol=1e-6)

    def test_affine_endpoints(self):
        norm = ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
        zeros = np.zeros((1, 3, 2, 2), np.float32)
        ones = np.ones((1, 3, 2, 2), np.float32)
        assert np.allclose(apply_normalization(zeros, norm), -1.0)
        assert np.allclose(apply_normalization(ones, norm), 1.0)


def _write_cifar(root, train_counts=(5, 4), test_count=3):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)

    def records(n, start):
        recs = np.zeros((n, 3073), np.uint8)
        recs[:, 0] = (start + np.arange(n)) % 10
        recs[:, 1:] = rng.integers(0, 256, (n, 3072))
        return recs.tobytes()

    for i, n in enumerate(train_counts, start=1):
        (root / f"data_batch_{i}.bin").write_bytes(records(n, i))
    (root / "test_batch.bin").write_bytes(records(test_count, 0))


class TestCifarLoader:
    def test_counts_follow_file_sizes(self, tmp_path):
        _write_cifar(tmp_path, (5, 4), 3)
        ds = load_dataset("cifar10", tmp_path)
        assert len(ds.train) == 9
        assert len(ds.test) == 3
        assert ds.num_classes == 10
        assert ds.train.pixels.max() <= 1.0

    def test_nested_layout(self, tmp_path):
        _write_cifar(tmp_path / "cifar-10-batches-bin")
        ds = load_dataset("cifar10", tmp_path)
        assert len(ds.train) == 9

    def test_label_bytes_decoded(self, tmp_path):
        _write_cifar(tmp_path, (5,), 2)
        ds = load_dataset("cifar10", tmp_path)
        assert ds.train.labels.tolist() == [1, 2, 3, 4, 5]

    def test_corrupt_framing(self, tmp_path):
        _write_cifar(tmp_path)
        with open(tmp_path / "data_batch_1.bin", "ab") as fh:
            fh.write(b"x")
        with pytest.raises(IngestionError):
            load_dataset("cifar10", tmp_path)

    def test_empty_directory(self, tmp_path):
        tmp_path.joinpath("empty").mkdir()
        with pytest.raises(IngestionError):
            load_dataset("cifar10", tmp_path / "empty")

    def test_missing_root(self, tmp_path):
        with pytest.raises(IngestionError):
            load_dataset("cifar10", tmp_path / "nowhere")


def _write_image_folder(root, classes=("a", "b", "c", "d"), per_split=2, size=8):
    from PIL import Image

    rng = np.random.default_rng(0)
    for split in ("train", "test"):
        for cname in classes:
            d = root / split / cname
            d.mkdir(parents=True)
            for i in range(per_split):
                arr = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
                Image.fromarray(arr, "RGB").save(d / f"{i}.png")


class TestImageFolder:
    def test_class_count_from_directories(self, tmp_path):
        _write_image_folder(tmp_path)
        ds = load_dataset("imagefolder", tmp_path)
        assert ds.num_classes == 4
        assert ds.class_names == ["a", "b", "c", "d"]
        assert len(ds.train) == 8

    def test_inconsistent_size_rejected(self, tmp_path):
        from PIL import Image

        _write_image_folder(tmp_path, size=8)
        odd = np.zeros((9, 9, 3), np.uint8)
        Image.fromarray(odd, "RGB").save(tmp_path / "train" / "a" / "odd.png")
        with pytest.raises(IngestionError):
            load_dataset("imagefolder", tmp_path).train

    def test_no_pngs_rejected(self, tmp_path):
        (tmp_path / "train" / "a").mkdir(parents=True)
        (tmp_path / "test" / "a").mkdir(parents=True)
        with pytest.raises(IngestionError):
            load_dataset("imagefolder", tmp_path)

    def test_unknown_name(self, tmp_path):
        with pytest.raises(InputError):
            load_dataset("mystery", tmp_path)
