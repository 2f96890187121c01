"""Datasets: IDX loading, synthetic blobs and per-device partitioning."""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConsistencyError, FormatError
from .models import Batch

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ConsistencyError(f"features {x.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ConsistencyError(f"labels outside [0, {self.class_count})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    def as_batch(self):
        return Batch(self.features, self.labels)


def _read_idx(path, magic):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    (found,) = struct.unpack(">i", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic number {found}, expected {magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path, labels_path, class_count=None):
    """Read an uncompressed IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = max(int(labels.max()) + 1, 10) if labels.size else 10
    return Dataset(features, labels, class_count)


def write_idx(path, array, magic):
    """Write a uint8 array in IDX layout (used by tests and tooling)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">i", magic))
        f.write(struct.pack(f">{array.ndim}i", *array.shape))
        f.write(array.tobytes())


def blob_means(class_count, dim, scale=1.0):
    """Class means at +e_1, -e_1, +e_2, -e_2, ... (times ``scale``)."""
    if dim < (class_count + 1) // 2:
        raise CapacityError(f"{class_count} classes need dim >= {(class_count + 1) // 2}")
    means = np.zeros((class_count, dim))
    for c in range(class_count):
        means[c, c // 2] = scale if c % 2 == 0 else -scale
    return means


def synthetic_blobs(class_count, per_class, dim, spread, seed, scale=1.0, layout="axis"):
    """Isotropic Gaussian clusters of std ``spread``.

    ``layout="axis"`` centres the classes on :func:`blob_means`;
    ``layout="templates"`` draws every class mean coordinate from
    ``N(0, scale**2)``, spreading the class signal over all features the way
    pixel templates do.
    """
    if class_count < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 sample per class")
    rng = np.random.default_rng(seed)
    if layout == "axis":
        means = blob_means(class_count, dim, scale)
    elif layout == "templates":
        means = scale * rng.standard_normal((class_count, dim))
    else:
        raise ValueError(f"unknown blob layout {layout!r}")
    labels = np.repeat(np.arange(class_count), per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, dim))
    return Dataset(features, labels, class_count)


@dataclass(frozen=True)
class PartitionPlan:
    device_count: int
    scheme: str = "label-shard"
    shards_per_device: int = 2
    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.device_count < 1:
            raise ValueError("device_count must be >= 1")
        if self.scheme not in ("iid", "label-shard"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.shards_per_device < 1:
            raise ValueError("shards_per_device must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


def device_indices(ds, plan):
    """Sample indices owned by each device; remainders are dropped."""
    n, N = len(ds), plan.device_count
    rng = np.random.default_rng(plan.seed)
    if plan.scheme == "iid":
        if n < N:
            raise CapacityError(f"{n} samples cannot cover {N} devices")
        per = n // N
        perm = rng.permutation(n)
        return [perm[i * per:(i + 1) * per] for i in range(N)]

    n_shards = N * plan.shards_per_device
    if n < n_shards:
        raise CapacityError(f"{n} samples cannot fill {n_shards} label shards")
    size = n // n_shards
    by_label = np.argsort(ds.labels, kind="stable")
    shards = [by_label[s * size:(s + 1) * size] for s in range(n_shards)]
    order = rng.permutation(n_shards)
    k = plan.shards_per_device
    return [np.concatenate([shards[s] for s in order[i * k:(i + 1) * k]]) for i in range(N)]


def train_test_split(ds, train_fraction, rng):
    m = len(ds)
    if m < 2:
        raise CapacityError("a device shard needs at least 2 samples to split")
    n_train = min(max(int(np.floor(train_fraction * m)), 1), m - 1)
    perm = rng.permutation(m)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def partition(ds, plan):
    """Deal ``ds`` out to devices and split each shard train/test."""
    rng = np.random.default_rng([plan.seed, 1])
    out = []
    for idx in device_indices(ds, plan):
        out.append(train_test_split(ds.subset(idx), plan.train_fraction, rng))
    return out
