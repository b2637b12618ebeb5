"""Dataset container, native-format loaders, synthetic fixtures and splitting."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
import pandas as pd

from dcfl.errors import ConsistencyError, DataError, FormatError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

COVTYPE_COLUMNS = 55
COVTYPE_CONTINUOUS = 10  # elevation .. fire-point distance; the rest are 0/1 flags
COVTYPE_POSITIVE_TYPE = 2


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or len(self.labels) != self.features.shape[0]:
            raise ConsistencyError(
                f"{len(self.labels)} labels for {self.features.shape[0]} feature rows"
            )
        if self.num_classes < 2:
            raise DataError("a dataset needs at least two classes")
        if self.features.shape[1] < 1:
            raise DataError("feature_dim must be at least 1")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)


def concat(parts: list[Dataset]) -> Dataset:
    if not parts:
        raise DataError("nothing to concatenate")
    q = parts[0].num_classes
    if any(p.num_classes != q or p.feature_dim != parts[0].feature_dim for p in parts):
        raise ConsistencyError("datasets disagree on num_classes or feature_dim")
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        q,
    )


def _open_binary(path: str | Path) -> BinaryIO:
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: str | Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    with _open_binary(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    if len(payload) != int(np.prod(dims)):
        raise FormatError(f"{path}: payload of {len(payload)} bytes does not match dims {dims}")
    return dims, payload


def load_mnist_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped).

    Pixels are scaled to [0, 1] by dividing by 255; sample order follows the file.
    """
    img_dims, img_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC)
    lab_dims, lab_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != lab_dims[0]:
        raise ConsistencyError(
            f"{img_dims[0]} images but {lab_dims[0]} labels in {images_path} / {labels_path}"
        )
    n = img_dims[0]
    pixels = np.frombuffer(img_bytes, dtype=np.uint8).reshape(n, -1)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8).astype(np.int64)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, 10)


def write_mnist_idx(images: np.ndarray, labels: np.ndarray,
                    images_path: str | Path, labels_path: str | Path) -> None:
    """Write uint8 images ``[n, rows, cols]`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_covtype_csv(path: str | Path) -> Dataset:
    """Load the UCI covertype file as a binary task.

    Class 1 is cover type 2 (Lodgepole Pine), everything else is class 0.
    The ten continuous columns are z-scored over the whole file (population
    std); the binary wilderness/soil indicator columns are kept as 0/1.
    """
    try:
        frame = pd.read_csv(path, header=None, keep_default_na=False)
    except pd.errors.ParserError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise FormatError(f"{path}: empty file") from exc
    if frame.shape[1] != COVTYPE_COLUMNS:
        raise FormatError(f"{path}: expected {COVTYPE_COLUMNS} columns, found {frame.shape[1]}")
    bad = [c for c in frame.columns if not pd.api.types.is_numeric_dtype(frame[c])]
    if bad:
        col = bad[0]
        cell = next(v for v in frame[col] if not _is_number(v))
        raise DataError(f"{path}: non-numeric cell {cell!r} in column {col}")
    values = frame.to_numpy(dtype=np.float64)

    cover = values[:, -1]
    if cover.min() < 1 or cover.max() > 7:
        raise DataError(f"{path}: cover type outside 1..7")
    labels = (cover == COVTYPE_POSITIVE_TYPE).astype(np.int64)

    features = values[:, :-1].copy()
    cont = features[:, :COVTYPE_CONTINUOUS]
    mean = cont.mean(axis=0)
    std = cont.std(axis=0)
    std[std == 0] = 1.0
    features[:, :COVTYPE_CONTINUOUS] = (cont - mean) / std
    return Dataset(features, labels, 2)


def _is_number(value) -> bool:
    try:
        float(value)
    except (TypeError, ValueError):
        return False
    return True


def generate_synthetic(num_classes: int, feature_dim: int, n_per_class: int,
                       separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian blobs, one per class.

    Centres sit on a regular polygon in the first two coordinates so that
    neighbouring centres are exactly ``separation`` apart (on a line when
    ``feature_dim == 1``). Samples are emitted in shuffled order.
    """
    if num_classes < 2 or n_per_class < 1 or feature_dim < 1:
        raise ValueError("need num_classes >= 2, n_per_class >= 1, feature_dim >= 1")
    rng = np.random.default_rng(seed)
    centres = np.zeros((num_classes, feature_dim))
    if feature_dim == 1:
        centres[:, 0] = separation * np.arange(num_classes)
    else:
        radius = separation / (2.0 * np.sin(np.pi / num_classes))
        angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
        centres[:, 0] = radius * np.cos(angles)
        centres[:, 1] = radius * np.sin(angles)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    features = centres[labels] + rng.standard_normal((len(labels), feature_dim))
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order], num_classes)


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Uniform without-replacement subsample, original order kept."""
    if n >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(ds), size=n, replace=False))
    return ds.subset(idx)


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n == 0:
        raise DataError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return perm[:n_train], perm[n_train:]


def train_test_split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = split_indices(len(ds), train_fraction, seed)
    return ds.subset(train_idx), ds.subset(test_idx)
