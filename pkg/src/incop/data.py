"""Datasets: IDX parsing/writing, synthetic Gaussian blobs, subsetting, batching."""

from __future__ import annotations

import gzip
import hashlib
import math
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, InputError

# IDX type byte -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_TYPE_CODES = {dt.newbyteorder("="): code for code, dt in IDX_TYPES.items()}

IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
DATA_DIR_ENV = "INCOP_DATA_DIR"


def _open(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"truncated IDX header at byte offset {len(buf)}")
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in IDX_TYPES or ndim == 0:
        raise FormatError(f"bad IDX magic 0x{int.from_bytes(buf[:4], 'big'):08X} at byte offset 0")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"truncated IDX dimensions at byte offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = IDX_TYPES[code]
    expected = header + math.prod(dims) * dtype.itemsize
    if len(buf) < expected:
        raise FormatError(f"truncated IDX payload at byte offset {len(buf)} (expected {expected} bytes)")
    if len(buf) > expected:
        raise FormatError(f"trailing bytes after IDX payload at byte offset {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=header, count=math.prod(dims))
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    path = Path(path)
    with _open(path, "rb") as fh:
        buf = fh.read()
    try:
        return parse_idx(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_idx(path, array) -> None:
    arr = np.asarray(array)
    code = _TYPE_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise InputError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload = arr.astype(IDX_TYPES[code], copy=False).tobytes()
    with _open(Path(path), "wb") as fh:
        fh.write(header + payload)


@dataclass(frozen=True)
class Split:
    inputs: np.ndarray  # (n, rows, cols) or (n, features)
    labels: np.ndarray


def load_idx(images_path, labels_path) -> Split:
    """Load an image/label IDX pair; ``uint8`` pixels are scaled into [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (2, 3):
        raise FormatError(f"{images_path}: expected 2 or 3 image dimensions, got {images.ndim}")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: bad IDX magic for labels (ndim {labels.ndim}) at byte offset 0")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{labels_path}: label count {labels.shape[0]} does not match image count "
            f"{images.shape[0]} (byte offset 4)")
    if images.dtype == np.uint8:
        inputs = images.astype(np.float64) / 255.0
    else:
        inputs = images.astype(np.float64)
    return Split(inputs, labels.astype(np.int64))


@dataclass(frozen=True)
class Dataset:
    name: str
    train_inputs: np.ndarray  # (n, features)
    train_labels: np.ndarray
    test_inputs: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    input_shape: tuple[int, ...]

    def __post_init__(self):
        for arr in (self.train_labels, self.test_labels):
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise InputError(f"labels must lie in [0, {self.num_classes})")

    @property
    def num_train(self) -> int:
        return len(self.train_labels)

    @property
    def num_test(self) -> int:
        return len(self.test_labels)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.train_inputs, self.train_labels, self.test_inputs, self.test_labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _shape_for(features: int, sample_shape: tuple[int, ...]) -> tuple[int, ...]:
    if len(sample_shape) == 2:
        return (1, *sample_shape)
    return (features,)


def dataset_from_splits(name: str, train: Split, test: Split,
                        num_classes: int | None = None) -> Dataset:
    sample_shape = train.inputs.shape[1:]
    if test.inputs.shape[1:] != sample_shape:
        raise InputError("train and test samples differ in shape")
    features = math.prod(sample_shape)
    if num_classes is None:
        num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    return Dataset(
        name=name,
        train_inputs=train.inputs.reshape(len(train.labels), features),
        train_labels=train.labels,
        test_inputs=test.inputs.reshape(len(test.labels), features),
        test_labels=test.labels,
        num_classes=num_classes,
        input_shape=_shape_for(features, sample_shape),
    )


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise InputError(f"missing {stem}[.gz] in {directory}")


def load_idx_dir(directory, name: str = "idx") -> Dataset:
    """Load the four standard MNIST-layout IDX files from ``directory``."""
    directory = Path(directory)
    train = load_idx(_find(directory, IDX_FILES["train_images"]), _find(directory, IDX_FILES["train_labels"]))
    test = load_idx(_find(directory, IDX_FILES["test_images"]), _find(directory, IDX_FILES["test_labels"]))
    return dataset_from_splits(name, train, test)


def resolve_data_dir(name: str, path=None) -> Path:
    if path:
        return Path(path)
    root = os.environ.get(DATA_DIR_ENV)
    if not root:
        raise InputError(f"no path given for dataset {name!r} and ${DATA_DIR_ENV} is unset")
    return Path(root) / name


def write_dataset_idx(dataset: Dataset, directory) -> None:
    """Write a dataset as four float64 IDX files (bit-exact round trip)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shape = dataset.input_shape[1:] if len(dataset.input_shape) == 3 else dataset.input_shape
    for key, inputs, labels in (("train", dataset.train_inputs, dataset.train_labels),
                                ("test", dataset.test_inputs, dataset.test_labels)):
        write_idx(directory / IDX_FILES[f"{key}_images"],
                  np.asarray(inputs, dtype=np.float64).reshape(len(labels), *shape))
        write_idx(directory / IDX_FILES[f"{key}_labels"], np.asarray(labels, dtype=np.uint8))


def synthetic_dataset(num_classes: int, dims: int, samples_per_class: int, seed: int,
                      margin: float, test_per_class: int | None = None) -> Dataset:
    """Isotropic unit-variance Gaussian blobs.

    Centers are seeded random directions rescaled so that the closest pair
    lies ``2 * margin`` apart, i.e. every center is at least ``margin``
    standard deviations from each pairwise decision boundary.
    """
    if num_classes < 2 or dims < 2 or samples_per_class < 1 or not margin > 0:
        raise InputError("synthetic data needs num_classes >= 2, dims >= 2, "
                         "samples_per_class >= 1 and margin > 0")
    if test_per_class is None:
        test_per_class = max(1, samples_per_class // 5)
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dims))
    gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    gaps[np.diag_indices(num_classes)] = np.inf
    centers *= 2.0 * margin / gaps.min()

    def draw(per_class):
        labels = np.repeat(np.arange(num_classes), per_class)
        labels = labels[rng.permutation(labels.size)]
        return centers[labels] + rng.standard_normal((labels.size, dims)), labels

    train_x, train_y = draw(samples_per_class)
    test_x, test_y = draw(test_per_class)
    side = math.isqrt(dims)
    input_shape = (1, side, side) if side * side == dims else (dims,)
    return Dataset("synthetic", train_x, train_y, test_x, test_y, num_classes, input_shape)


def _stratified(labels: np.ndarray, n: int, num_classes: int, rng) -> np.ndarray:
    if n > labels.size:
        raise InputError(f"requested {n} samples but only {labels.size} are available")
    if n == labels.size:
        return np.arange(n)
    base, extra = divmod(n, num_classes)
    picked = []
    for cls in range(num_classes):
        want = base + (1 if cls < extra else 0)
        pool = np.flatnonzero(labels == cls)
        if want > pool.size:
            raise InputError(f"class {cls} has {pool.size} samples, {want} requested")
        picked.append(pool[rng.permutation(pool.size)[:want]])
    return np.sort(np.concatenate(picked))


def subset(dataset: Dataset, n_train: int, n_test: int, seed: int) -> Dataset:
    """Class-stratified seeded subset of both splits."""
    rng = np.random.default_rng(seed)
    tr = _stratified(dataset.train_labels, n_train, dataset.num_classes, rng)
    te = _stratified(dataset.test_labels, n_test, dataset.num_classes, rng)
    return replace(dataset,
                   train_inputs=dataset.train_inputs[tr], train_labels=dataset.train_labels[tr],
                   test_inputs=dataset.test_inputs[te], test_labels=dataset.test_labels[te])


def normalize(dataset: Dataset) -> Dataset:
    """Standardise both splits with the training split's scalar mean and std."""
    mean = float(dataset.train_inputs.mean())
    std = float(dataset.train_inputs.std())
    if std == 0:
        raise InputError("training inputs have zero variance")
    return replace(dataset,
                   train_inputs=(dataset.train_inputs - mean) / std,
                   test_inputs=(dataset.test_inputs - mean) / std)


class BatchIterator:
    """Seeded shuffling; epoch order depends only on (base_seed, epoch_index)."""

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, batch_size: int, base_seed: int):
        if batch_size < 1:
            raise InputError("batch_size must be positive")
        self.inputs = inputs
        self.labels = labels
        self.batch_size = batch_size
        self.base_seed = base_seed

    def order(self, epoch_index: int) -> np.ndarray:
        return np.random.default_rng([self.base_seed, epoch_index]).permutation(len(self.labels))

    def epoch(self, epoch_index: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.order(epoch_index)
        for start in range(0, order.size, self.batch_size):
            idx = order[start:start + self.batch_size]
            yield self.inputs[idx], self.labels[idx]
