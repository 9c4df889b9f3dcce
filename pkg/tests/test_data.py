import numpy as np
import pytest

from otprune.data import (CIFAR_RECORD, CifarFormatError, augment_batch, load_cifar10, make_synthetic,
                          nearest_centroid_accuracy, read_cifar_batch)


def test_synthetic_deterministic():
    a, b = make_synthetic(4, 100, 8, seed=1), make_synthetic(4, 100, 8, seed=1)
    assert np.array_equal(a.train.images, b.train.images)
    assert np.array_equal(a.test.labels, b.test.labels)
    c = make_synthetic(4, 100, 8, seed=2)
    assert not np.array_equal(a.train.images, c.train.images)


def test_synthetic_split_and_labels():
    ds = make_synthetic(5, 50, 6, seed=3)
    assert len(ds.train) == 5 * 40 and len(ds.test) == 5 * 10
    assert set(ds.train.labels) == set(ds.test.labels) == set(range(5))
    assert ds.input_shape == (3, 6, 6)
    assert ds.train.images.dtype == np.float32


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_nearest_centroid_reaches_margin(seed):
    assert nearest_centroid_accuracy(make_synthetic(4, 500, 8, seed=seed)) >= 99.0


def test_margin_is_documented():
    info = make_synthetic(4, 10, 8, seed=1).info
    assert info["noise_sigma"] == pytest.approx(info["template_min_distance"] / (2 * info["margin"]))
    assert info["pairwise_bayes_error"] < 1e-4


def test_invalid_sizes():
    with pytest.raises(ValueError):
        make_synthetic(0, 10, 8)


def write_records(path, labels, rng):
    recs = [bytes([lab]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes() for lab in labels]
    path.write_bytes(b"".join(recs))
    return recs


def test_cifar_two_records(tmp_path):
    rng = np.random.default_rng(0)
    recs = write_records(tmp_path / "b.bin", [3, 7], rng)
    split = read_cifar_batch(tmp_path / "b.bin", normalize=False)
    assert split.labels.tolist() == [3, 7]
    assert split.images.shape == (2, 3, 32, 32)
    assert split.images.min() >= 0 and split.images.max() <= 1
    raw = np.frombuffer(recs[1][1:], dtype=np.uint8).reshape(3, 32, 32)
    assert np.array_equal(np.round(split.images[1] * 255).astype(np.uint8), raw)


def test_cifar_bad_length(tmp_path):
    (tmp_path / "b.bin").write_bytes(b"\0" * (CIFAR_RECORD + 5))
    with pytest.raises(CifarFormatError):
        read_cifar_batch(tmp_path / "b.bin")


def test_cifar_directory(tmp_path):
    rng = np.random.default_rng(1)
    write_records(tmp_path / "data_batch_1.bin", [0, 1, 2], rng)
    write_records(tmp_path / "data_batch_2.bin", [3], rng)
    write_records(tmp_path / "test_batch.bin", [9, 8], rng)
    ds = load_cifar10(tmp_path)
    assert len(ds.train) == 4 and len(ds.test) == 2 and ds.augment


def test_cifar_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path)


def test_augment_preserves_shape_and_content():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3, 8, 8)).astype(np.float32)
    y = augment_batch(x, np.random.default_rng(1), pad=0)
    # with no padding only mirroring can happen
    for a, b in zip(x, y):
        assert np.array_equal(a, b) or np.array_equal(a[:, :, ::-1], b)
    z = augment_batch(x, np.random.default_rng(1))
    assert z.shape == x.shape
