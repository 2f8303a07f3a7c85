"""Dataset loading (MNIST IDX, CIFAR-10 binary), IID partitioning, synthetic blobs."""

import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, PartitionError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

MNIST_NORM = ((0.1307,), (0.3081,))
CIFAR_NORM = ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
MNIST_TRAIN_LIMIT = 50000


@dataclass
class Dataset:
    """Images as (N, C, H, W) float32, normalized; integer labels in [0, 9]."""

    images: np.ndarray
    labels: np.ndarray
    name: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.name)

    def head(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.name)


@dataclass
class Partition:
    client_indices: list

    @property
    def num_clients(self):
        return len(self.client_indices)


# ---------------------------------------------------------------------------
# IDX


def _read_maybe_gz(path):
    """Bytes of ``path`` (or ``path.gz``), gunzipped when the gzip magic is present."""
    path = str(path)
    if not os.path.exists(path):
        if not os.path.exists(path + ".gz"):
            raise FileNotFoundError(path)
        path += ".gz"
    with open(path, "rb") as f:
        raw = f.read()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into a uint8 array."""
    raw = _read_maybe_gz(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated header")
        rows, cols = struct.unpack(">II", raw[8:16])
        shape, offset = (count, rows, cols), 16
    elif magic == IDX_LABELS_MAGIC:
        shape, offset = (count,), 8
    else:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}")
    expected = int(np.prod(shape))
    body = raw[offset:]
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def write_idx(path, array) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *array.shape)
    elif array.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, array.shape[0])
    else:
        raise ValueError("IDX writer supports (N, H, W) images or (N,) labels")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def _normalize(raw_nchw, norm):
    mean, std = (np.asarray(v, dtype=np.float32).reshape(1, -1, 1, 1) for v in norm)
    return (raw_nchw.astype(np.float32) / 255.0 - mean) / std


def load_mnist(directory, train_limit=MNIST_TRAIN_LIMIT, norm=MNIST_NORM):
    """Load MNIST from the four standard IDX files; keep the first ``train_limit`` training images."""
    paths = {k: os.path.join(directory, v) for k, v in MNIST_FILES.items()}
    train_x = read_idx(paths["train_images"])[:train_limit]
    train_y = read_idx(paths["train_labels"])[:train_limit]
    test_x = read_idx(paths["test_images"])
    test_y = read_idx(paths["test_labels"])
    log.info("MNIST normalization mean=%s std=%s", *norm)
    train = Dataset(_normalize(train_x[:, None], norm), train_y.astype(np.int64), "MNIST")
    test = Dataset(_normalize(test_x[:, None], norm), test_y.astype(np.int64), "MNIST")
    return train, test


def write_mnist(directory, train_images, train_labels, test_images, test_labels, compress=False):
    os.makedirs(directory, exist_ok=True)
    suffix = ".gz" if compress else ""
    for key, arr in (("train_images", train_images), ("train_labels", train_labels),
                     ("test_images", test_images), ("test_labels", test_labels)):
        write_idx(os.path.join(directory, MNIST_FILES[key] + suffix), arr)


# ---------------------------------------------------------------------------
# CIFAR-10


def read_cifar_batch(path):
    """Return ``(images uint8 (N, 3, 32, 32), labels uint8 (N,))``."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % CIFAR_RECORD_BYTES:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    return records[:, 1:].reshape(-1, 3, 32, 32), records[:, 0].copy()


def write_cifar_batch(path, images, labels) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


def load_cifar10(directory, norm=CIFAR_NORM):
    parts = [read_cifar_batch(os.path.join(directory, name)) for name in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read_cifar_batch(os.path.join(directory, CIFAR_TEST_FILE))
    log.info("CIFAR-10 normalization mean=%s std=%s", *norm)
    train = Dataset(_normalize(train_x, norm), train_y.astype(np.int64), "CIFAR10")
    test = Dataset(_normalize(test_x, norm), test_y.astype(np.int64), "CIFAR10")
    return train, test


# ---------------------------------------------------------------------------
# partitioning and synthetic data


def partition_iid(dataset, num_clients, seed=0) -> Partition:
    """Deal every class round-robin so each client gets the same count per class.

    Leftover samples (``class_count % num_clients``) are dropped.
    """
    if num_clients < 1:
        raise PartitionError("num_clients must be >= 1")
    labels = np.asarray(dataset.labels)
    classes = np.unique(labels)
    smallest = min(np.count_nonzero(labels == c) for c in classes)
    if num_clients > smallest:
        raise PartitionError(f"{num_clients} clients exceed smallest class size {smallest}")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(num_clients)]
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        per_client = len(idx) // num_clients
        dealt = idx[:per_client * num_clients]
        for k in range(num_clients):
            buckets[k].append(dealt[k::num_clients])
    return Partition([np.sort(np.concatenate(b)) for b in buckets])


def synthetic_dataset(num_samples, num_classes=10, input_shape=(1, 28, 28), seed=0, margin=5.0):
    """Gaussian blobs around random class centroids ``margin`` apart from the origin."""
    if num_samples < num_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    dim = int(np.prod(input_shape))
    centroids = rng.standard_normal((num_classes, dim))
    centroids *= margin / np.linalg.norm(centroids, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    images = centroids[labels] + rng.standard_normal((num_samples, dim)) / np.sqrt(dim)
    return Dataset(images.reshape(num_samples, *input_shape).astype(np.float32),
                   labels.astype(np.int64), "Synthetic")
