"""
CIFAR-10 binary batches.

Each record is one label byte followed by 3072 pixel bytes: the 1024 red,
then green, then blue values of a 32x32 image, row-major within a channel.
The full training set is five files of 10000 records, the test set one.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import structlog

from ..config import settings
from ..errors import DataFormatError

log = structlog.get_logger(__name__)

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
RECORD_BYTES = 1 + PIXELS
RECORDS_PER_FILE = 10000
CLASS_COUNT = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    """Images [N, 3, 32, 32] scaled to [0, 1] and integer labels in [0, 9]."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], split or self.split)


def decode_records(raw: bytes, source: str = "<bytes>", dtype=None) -> Dataset:
    if len(raw) % RECORD_BYTES:
        raise DataFormatError(
            f"{source}: size {len(raw)} is not a multiple of the {RECORD_BYTES}-byte record"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= CLASS_COUNT)
    if bad.size:
        offset = int(bad[0]) * RECORD_BYTES
        raise DataFormatError(f"{source}: label byte {labels[bad[0]]} > 9 at byte offset {offset}")
    dtype = np.dtype(dtype or settings.DATASET_DTYPE)
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(dtype) / dtype.type(255)
    return Dataset(images, labels.astype(np.int64))


def read_cifar_batch(path: Union[str, Path], expected_bytes: Optional[int] = None, dtype=None) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    size = path.stat().st_size
    if expected_bytes is not None and size != expected_bytes:
        raise DataFormatError(f"{path}: expected {expected_bytes} bytes, found {size}")
    return decode_records(path.read_bytes(), str(path), dtype)


def write_cifar_batch(path: Union[str, Path], images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of read_cifar_batch for images on the k/255 grid."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[1:] != IMAGE_SHAPE or len(images) != len(labels):
        raise DataFormatError(f"cannot write images {images.shape} with labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= CLASS_COUNT):
        raise DataFormatError("labels must lie in [0, 9]")
    pixels = np.clip(np.rint(images.reshape(len(images), -1) * 255.0), 0, 255).astype(np.uint8)
    records = np.concatenate([labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10(
    directory: Union[str, Path, None] = None,
    dtype=None,
    records_per_file: int = RECORDS_PER_FILE,
) -> tuple[Dataset, Dataset]:
    """Read the five training batches and the test batch from `directory`.

    Every file must hold exactly `records_per_file` records.
    """
    directory = Path(directory or settings.DATA_DIR)
    file_bytes = RECORD_BYTES * records_per_file
    parts = [read_cifar_batch(directory / name, file_bytes, dtype) for name in TRAIN_FILES]
    train = Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        "train",
    )
    test = read_cifar_batch(directory / TEST_FILE, file_bytes, dtype)
    test.split = "test"
    log.info("CIFAR dataset loaded", directory=str(directory), n_train=len(train), n_test=len(test))
    return train, test


def _per_class_indices(labels: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]


def stratified_subset(dataset: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """`per_class` images of every class, picked with a seeded permutation."""
    rng = np.random.default_rng(seed)
    picks = []
    for idx in _per_class_indices(dataset.labels, rng):
        if len(idx) < per_class:
            raise DataFormatError(f"class {dataset.labels[idx[0]]} has only {len(idx)} images")
        picks.append(idx[:per_class])
    return dataset.subset(np.sort(np.concatenate(picks)))


def stratified_split(dataset: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Hold out `fraction` of every class as a validation set."""
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for idx in _per_class_indices(dataset.labels, rng):
        n_val = int(round(len(idx) * fraction))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    train = dataset.subset(np.sort(np.concatenate(train_idx)), "train")
    val = dataset.subset(np.sort(np.concatenate(val_idx)), "val")
    return train, val
