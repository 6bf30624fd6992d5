"""Dataset ingestion: CIFAR-10 binary batches, IDX files, synthetic blobs.

All loaders produce float32 image stacks of shape (N, C, H, W), standardized
per channel with statistics computed on the training split and reapplied to
the test split.  Loading the same files twice yields bit-identical datasets.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import FormatError, UsageError
from .noise import RngStream

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
_STD_FLOOR = 1e-8  # constant channels normalize to zero instead of dividing by 0


@dataclass
class Dataset:
    images: np.ndarray  # float32 (N, C, H, W), normalized
    labels: np.ndarray  # int64 (N,)
    num_classes: int
    split: str
    channel_mean: np.ndarray  # float64 (C,) train-split statistics
    channel_std: np.ndarray  # float64 (C,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0] or self.images.shape[0] == 0:
            raise UsageError("dataset needs N > 0 images with matching labels")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise UsageError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]

    def metadata(self) -> dict:
        """JSON-ready description: counts, normalization stats, source hashes."""
        return {
            "split": self.split,
            "count": len(self),
            "num_classes": self.num_classes,
            "sample_shape": list(self.sample_shape),
            "channel_mean": [float(m) for m in self.channel_mean],
            "channel_std": [float(s) for s in self.channel_std],
            **self.meta,
        }


def _normalize(
    raw: np.ndarray, stats: Optional[tuple[np.ndarray, np.ndarray]] = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standardize per channel; stats come from ``raw`` unless provided."""
    if stats is None:
        mean = raw.mean(axis=(0, 2, 3), dtype=np.float64)
        std = raw.std(axis=(0, 2, 3), dtype=np.float64)
    else:
        mean, std = stats
    safe_std = np.maximum(std, _STD_FLOOR)
    images = ((raw - mean[None, :, None, None]) / safe_std[None, :, None, None]).astype(
        np.float32
    )
    return images, mean, std


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: length {raw.size} is not a positive multiple of "
            f"{_CIFAR_RECORD} (truncated at byte offset "
            f"{raw.size - raw.size % _CIFAR_RECORD})"
        )
    records = raw.reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(
            f"{path}: label byte {labels[bad[0]]} > 9 at byte offset "
            f"{int(bad[0]) * _CIFAR_RECORD}"
        )
    # channel-planar R,G,B then row-major 32x32 per channel
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_binary(directory: str) -> tuple[Dataset, Dataset]:
    """Load the standard CIFAR-10 binary distribution layout."""
    train_files = [
        os.path.join(directory, f"data_batch_{i}.bin") for i in range(1, 6)
    ]
    test_file = os.path.join(directory, "test_batch.bin")
    for path in train_files + [test_file]:
        if not os.path.isfile(path):
            raise FormatError(f"missing CIFAR-10 batch file: {path}")
    parts = [_read_cifar_file(p) for p in train_files]
    train_raw = np.concatenate([p[0] for p in parts])
    train_labels = np.concatenate([p[1] for p in parts])
    test_raw, test_labels = _read_cifar_file(test_file)
    train_images, mean, std = _normalize(train_raw)
    test_images, _, _ = _normalize(test_raw, stats=(mean, std))
    hashes = {os.path.basename(p): _sha256(p) for p in train_files + [test_file]}
    meta = {"source": "cifar10-binary", "file_sha256": hashes}
    train = Dataset(train_images, train_labels, 10, "train", mean, std, dict(meta))
    test = Dataset(test_images, test_labels, 10, "test", mean, std, dict(meta))
    return train, test


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(4)
        if len(header) < 4:
            raise FormatError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", header)
        if magic != expected_magic:
            raise FormatError(
                f"{path}: IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        ndim = magic & 0xFF
        dim_bytes = f.read(4 * ndim)
        if len(dim_bytes) < 4 * ndim:
            raise FormatError(f"{path}: truncated IDX dimension header")
        dims = struct.unpack(f">{ndim}I", dim_bytes)
        payload = np.frombuffer(f.read(), dtype=np.uint8)
    expected = int(np.prod(dims))
    if payload.size != expected:
        raise FormatError(
            f"{path}: payload has {payload.size} bytes, header promises {expected}"
        )
    return payload.reshape(dims)


def load_idx(
    images_path: str,
    labels_path: str,
    split: str = "train",
    stats: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> Dataset:
    """Load an IDX image/label pair (MNIST layout, grayscale C=1).

    Pass ``stats`` from a previously loaded training split to normalize a
    test split consistently.
    """
    images_u8 = _read_idx(images_path, 0x00000803)
    labels_u8 = _read_idx(labels_path, 0x00000801)
    if images_u8.shape[0] != labels_u8.shape[0]:
        raise FormatError(
            f"image count {images_u8.shape[0]} != label count {labels_u8.shape[0]}"
        )
    raw = (images_u8.astype(np.float32) / 255.0)[:, None, :, :]
    labels = labels_u8.astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 1
    images, mean, std = _normalize(raw, stats=stats)
    meta = {
        "source": "idx",
        "file_sha256": {
            os.path.basename(images_path): _sha256(images_path),
            os.path.basename(labels_path): _sha256(labels_path),
        },
    }
    return Dataset(images, labels, num_classes, split, mean, std, meta)


def synthetic_blobs(
    num_classes: int,
    n_per_class: int,
    dim: int,
    separation: float,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Gaussian blobs around seeded centers with pairwise distance >= separation.

    Images come out as (N, dim, 1, 1) so the standard per-channel
    normalization applies per feature.  Train and test splits each hold
    ``n_per_class`` samples per class.
    """
    if separation <= 0:
        raise UsageError("separation must be > 0")
    stream = RngStream(seed).child("blobs")
    centers = (
        stream.child("centers")
        .normals(num_classes * dim)
        .reshape(num_classes, dim)
    )
    if num_classes > 1:
        deltas = centers[:, None, :] - centers[None, :, :]
        dists = np.sqrt((deltas**2).sum(axis=2))
        min_dist = dists[~np.eye(num_classes, dtype=bool)].min()
        if min_dist < 1e-9:
            raise UsageError("degenerate blob centers; change the seed")
        centers = centers * (separation / min_dist)

    def make_split(tag: str, stats=None):
        n = num_classes * n_per_class
        labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
        z = stream.child(tag).normals(n * dim).reshape(n, dim)
        raw = (centers[labels] + z).astype(np.float32).reshape(n, dim, 1, 1)
        images, mean, std = _normalize(raw, stats=stats)
        return (
            Dataset(
                images,
                labels,
                num_classes,
                tag,
                mean,
                std,
                {"source": "synthetic-blobs", "separation": separation, "seed": seed},
            ),
            (mean, std),
        )

    train, stats = make_split("train")
    test, _ = make_split("test", stats=stats)
    return train, test


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Class-stratified deterministic subsample of ``n`` items.

    Per-class quotas are proportional with largest-remainder rounding, so
    n == len(ds) returns every item and balanced sets split evenly.
    """
    if n > len(ds):
        raise UsageError(f"cannot subsample {n} from {len(ds)} items")
    if n < ds.num_classes:
        raise UsageError(f"need at least one item per class ({ds.num_classes})")
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    exact = n * counts / len(ds)
    quotas = np.floor(exact).astype(np.int64)
    remainder = n - int(quotas.sum())
    if remainder:
        frac = exact - quotas
        # largest remainders win; ties resolve toward the lower class index
        order = np.lexsort((np.arange(ds.num_classes), -frac))
        quotas[order[:remainder]] += 1
    stream = RngStream(seed).child("subsample")
    keep: list[np.ndarray] = []
    for cls in range(ds.num_classes):
        idx = np.nonzero(ds.labels == cls)[0]
        take = int(quotas[cls])
        if take > idx.size:
            raise UsageError(
                f"class {cls} has {idx.size} items, quota needs {take}"
            )
        perm = stream.child(cls).permutation(idx.size)
        keep.append(idx[perm[:take]])
    sel = np.concatenate(keep)
    return Dataset(
        ds.images[sel].copy(),
        ds.labels[sel].copy(),
        ds.num_classes,
        ds.split,
        ds.channel_mean,
        ds.channel_std,
        {**ds.meta, "subsampled_to": n, "subsample_seed": seed},
    )
