"""Datasets: CIFAR-10 binary batches, stratified subsets, and synthetic blobs."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DataFormatError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2471, 0.2435, 0.2616)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: str = "synthetic"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(f"images {self.images.shape} do not match labels {self.labels.shape}")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split,
                       self.provenance, self.seed, dict(self.meta))

    def channel_stats(self):
        x = self.images
        return tuple(x.mean(axis=(0, 2, 3))), tuple(x.std(axis=(0, 2, 3)))

    def validate(self):
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataError("pixels outside [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError("labels outside [0, K)")


@dataclass
class Splits:
    train: Dataset
    test: Dataset


def iter_batches(ds, batch_size, rng=None, dtype=None):
    """Yield (x, y); shuffled when an RNG is given, in order otherwise."""
    n = len(ds)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx]
        if dtype is not None:
            x = x.astype(dtype, copy=False)
        yield x, ds.labels[idx]


# ----------------------------------------------------------------- CIFAR-10
def parse_cifar_batch(raw, expected_records=None):
    """Decode 3073-byte records into (uint8 N×3×32×32 images, labels)."""
    size = len(raw)
    if expected_records is not None and size != expected_records * CIFAR_RECORD:
        raise DataFormatError(
            f"CIFAR-10 batch has {size} bytes, expected {expected_records * CIFAR_RECORD}")
    if size == 0 or size % CIFAR_RECORD:
        raise DataFormatError(
            f"CIFAR-10 batch has {size} bytes, expected a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"label byte {labels.max()} out of range for CIFAR-10")
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def encode_cifar_batch(images, labels):
    """Inverse of :func:`parse_cifar_batch`; accepts uint8 or [0, 1] float images."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.rint(images * 255.0).astype(np.uint8)
    rec = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images.reshape(len(labels), -1)
    return rec.tobytes()


def _read_files(directory, names, per_file):
    imgs, labs = [], []
    for name in names:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise DataError(f"missing CIFAR-10 file {path}")
        with open(path, "rb") as fp:
            x, y = parse_cifar_batch(fp.read(), per_file)
        imgs.append(x)
        labs.append(y)
    return np.concatenate(imgs), np.concatenate(labs)


def stratified_indices(labels, n, num_classes, seed):
    """Seeded sample with equal per-class counts (remainder to the lowest classes)."""
    rng = np.random.default_rng(seed)
    base, extra = divmod(n, num_classes)
    picked = []
    for k in range(num_classes):
        want = base + (1 if k < extra else 0)
        pool = np.flatnonzero(labels == k)
        if len(pool) < want:
            raise DataError(f"class {k} has {len(pool)} samples, {want} requested")
        picked.append(rng.choice(pool, size=want, replace=False))
    idx = np.concatenate(picked)
    return idx[rng.permutation(len(idx))]


def load_cifar10(directory, subset=None, seed=0, records_per_file=CIFAR_PER_FILE):
    """Load the binary CIFAR-10 release, optionally as a stratified (n_train, n_test) subset."""
    xtr, ytr = _read_files(directory, CIFAR_TRAIN_FILES, records_per_file)
    xte, yte = _read_files(directory, (CIFAR_TEST_FILE,), records_per_file)
    if subset is not None:
        n_train, n_test = subset
        itr = stratified_indices(ytr, n_train, 10, seed)
        ite = stratified_indices(yte, n_test, 10, seed + 1)
        xtr, ytr, xte, yte = xtr[itr], ytr[itr], xte[ite], yte[ite]
    scale = np.float64(1.0 / 255.0)
    meta = {"mean": CIFAR_MEAN, "std": CIFAR_STD}
    train = Dataset(xtr * scale, ytr, 10, "train", "cifar10", seed, dict(meta))
    test = Dataset(xte * scale, yte, 10, "test", "cifar10", seed, dict(meta))
    return Splits(train, test)


# ------------------------------------------------------------------ synthetic
def _smooth_template(rng, channels, size):
    """Low-frequency pattern in [-1, 1]: a few random cosine modes."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(3):
            fy, fx = rng.integers(0, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            out[c] += np.cos(2 * np.pi * (fy * yy + fx * xx) / size + phase)
    return out / np.abs(out).max()


def synth_blobs(n, num_classes, d_spatial=8, seed=0, split="train", channels=3,
                spread=0.1, mean_gap=0.15, pattern=0.1):
    """Class-conditional Gaussian images.

    Class k has a channel-mean vector drawn around 0.5 plus a smooth spatial
    template; pixels add iid N(0, spread²) noise and are clipped to [0, 1].
    Prototypes depend on ``seed`` only, so the train and test splits built from
    one seed share them; the noise stream additionally depends on ``split``.
    """
    if num_classes < 2:
        raise ConfigError("synthetic blobs need at least two classes")
    proto = np.random.default_rng([seed, 0])
    means = 0.5 + mean_gap * proto.uniform(-1, 1, size=(num_classes, channels))
    templates = np.stack([_smooth_template(proto, channels, d_spatial) for _ in range(num_classes)])
    salt = {"train": 1, "test": 2}.get(split, 3)
    rng = np.random.default_rng([seed, salt])
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    x = means[labels][:, :, None, None] + pattern * templates[labels]
    x = x + spread * rng.standard_normal((n, channels, d_spatial, d_spatial))
    images = np.clip(x, 0.0, 1.0)
    return Dataset(images, labels, num_classes, split, "synthetic", seed,
                   {"spread": spread, "mean_gap": mean_gap, "pattern": pattern})


def synth_splits(n_train, n_test, num_classes, d_spatial=8, seed=0, **kw):
    return Splits(synth_blobs(n_train, num_classes, d_spatial, seed, "train", **kw),
                  synth_blobs(n_test, num_classes, d_spatial, seed, "test", **kw))


def augment_crop_flip(x, rng, pad=4):
    """Random crop after zero padding plus horizontal flip (CIFAR-style)."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out
