"""Datasets: a reproducible synthetic generator and a CIFAR-10 binary reader."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .seeding import stream

CIFAR_RECORD = 1 + 3072
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2023, 0.1994, 0.2010])


@dataclass
class Split:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    name: str = "train"

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int
    augment: bool = False
    info: dict | None = None
    templates: np.ndarray | None = None

    @property
    def input_shape(self):
        return tuple(self.train.images.shape[1:])


class CifarFormatError(ValueError):
    pass


def make_synthetic(num_classes=4, samples_per_class=500, image_size=8, seed=1,
                   channels=3, margin=4.0, blobs=2) -> Dataset:
    """Class-conditional Gaussian-blob images.

    Each class owns a template made of ``blobs`` coloured Gaussian bumps; a
    sample is its template plus i.i.d. pixel noise.  The noise level is set
    so that the closest pair of templates sits ``2 * margin`` noise standard
    deviations apart, i.e. the Bayes error of any pair is ``Phi(-margin)``
    (about 3e-5 at the default).  The first 80% of each class's samples
    form the training split.
    """
    if min(num_classes, samples_per_class, image_size, channels) < 1:
        raise ValueError("sizes must be >= 1")
    rng = stream(seed, "synthetic")
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    templates = np.zeros((num_classes, channels, image_size, image_size))
    for c in range(num_classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, image_size - 1, size=2)
            width = rng.uniform(0.12, 0.3) * image_size
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            templates[c] += rng.normal(size=channels)[:, None, None] * bump
    flat = templates.reshape(num_classes, -1)
    if num_classes > 1:
        d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
        dmin = d[np.triu_indices(num_classes, 1)].min()
    else:
        dmin = 1.0
    sigma = dmin / (2 * margin)

    n_train = max(1, int(round(0.8 * samples_per_class))) if samples_per_class > 1 else 1
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(num_classes):
        x = templates[c] + sigma * rng.normal(size=(samples_per_class,) + templates.shape[1:])
        tr_x.append(x[:n_train]), te_x.append(x[n_train:])
        tr_y += [c] * n_train
        te_y += [c] * (samples_per_class - n_train)
    train = Split(np.concatenate(tr_x).astype(np.float32), np.array(tr_y, dtype=np.int64), "train")
    test = Split(np.concatenate(te_x).astype(np.float32), np.array(te_y, dtype=np.int64), "test")
    info = {"kind": "synthetic", "seed": seed, "noise_sigma": float(sigma), "template_min_distance": float(dmin),
            "margin": margin, "pairwise_bayes_error": float(ndtr(-margin))}
    return Dataset(train, test, num_classes, augment=False, info=info, templates=templates)


def read_cifar_batch(path, normalize=True) -> Split:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise CifarFormatError(f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    if normalize:
        images = ((images - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]).astype(np.float32)
    return Split(images, labels)


def load_cifar10(directory, normalize=True, augment=True) -> Dataset:
    """Read ``data_batch_*.bin`` and ``test_batch.bin`` from a CIFAR-10 binary directory."""
    d = Path(directory)
    train_files = sorted(d.glob("data_batch_*.bin"))
    test_file = d / "test_batch.bin"
    if not train_files:
        raise FileNotFoundError(f"{d}: no data_batch_*.bin files")
    if not test_file.exists():
        raise FileNotFoundError(f"{test_file}: missing")
    parts = [read_cifar_batch(f, normalize) for f in train_files]
    train = Split(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), "train")
    test = read_cifar_batch(test_file, normalize)
    test.name = "test"
    for s in (train, test):
        if s.labels.max(initial=0) > 9:
            raise CifarFormatError(f"{d}: label out of range in {s.name} split")
    return Dataset(train, test, 10, augment=augment, info={"kind": "cifar10", "dir": str(d)})


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad=4) -> np.ndarray:
    """Zero-pad by ``pad`` pixels, take a random crop of the original size, mirror half."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def nearest_centroid_accuracy(ds: Dataset) -> float:
    """Accuracy (percent) of a nearest-class-mean classifier fit on the train split."""
    x = ds.train.images.reshape(len(ds.train), -1)
    cents = np.stack([x[ds.train.labels == c].mean(0) for c in range(ds.num_classes)])
    t = ds.test.images.reshape(len(ds.test), -1)
    pred = ((t[:, None] - cents[None]) ** 2).sum(-1).argmin(1)
    return float(100 * np.mean(pred == ds.test.labels))
