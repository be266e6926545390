"""IDX image reader/writer, synthetic correlated images, and mini-batch ordering."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from . import ar1_math
from .errors import IdxFormatError, InvalidParameterError

logger = logging.getLogger(__name__)

# IDX image layout (big endian):
#   0000  u32  0x00000803  magic (unsigned byte data, 3 dimensions)
#   0004  u32  count
#   0008  u32  rows
#   0012  u32  cols
#   0016  u8[] pixels, row-major
IDX_IMAGE_MAGIC = 0x00000803
IDX_HEADER = struct.Struct(">IIII")

TRAIN_IMAGES = "train-images-idx3-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
SPLITS = ("train", "test")

# Variance of the synthetic field before the sigmoid; std 3 keeps pixels away from 0.5.
FIELD_VARIANCE = 9.0

SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True)
class Dataset:
    images: NDArray[np.float64]  # (count, rows * cols)
    rows: int
    cols: int
    split: str = "train"

    def __post_init__(self) -> None:
        images = np.array(self.images, dtype=np.float64, copy=True)
        if self.split not in SPLITS:
            raise InvalidParameterError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.rows < 1 or self.cols < 1:
            raise InvalidParameterError("image rows and cols must be positive")
        if images.ndim != 2 or images.shape[1] != self.rows * self.cols:
            raise InvalidParameterError(
                f"images must be (count, {self.rows * self.cols}), got {images.shape}"
            )
        if not np.all(np.isfinite(images)):
            raise InvalidParameterError("pixel values must be finite")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise InvalidParameterError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.rows, self.cols


def read_idx_images(data: bytes, split: str = "train") -> Dataset:
    if len(data) < IDX_HEADER.size:
        raise IdxFormatError(f"truncated header: {len(data)} bytes, need {IDX_HEADER.size}")
    magic, count, rows, cols = IDX_HEADER.unpack_from(data, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"unexpected magic 0x{magic:08x} (expected 0x{IDX_IMAGE_MAGIC:08x})")
    if rows == 0 or cols == 0:
        raise IdxFormatError(f"empty image dimensions {rows}x{cols}")
    expected = count * rows * cols
    payload = data[IDX_HEADER.size :]
    if len(payload) < expected:
        raise IdxFormatError(f"truncated payload: {len(payload)} of {expected} pixel bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=expected)
    images = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(images=images, rows=rows, cols=cols, split=split)


def write_idx_images(dataset: Dataset) -> bytes:
    pixels = np.floor(dataset.images * 255.0 + 0.5).astype(np.uint8)
    header = IDX_HEADER.pack(IDX_IMAGE_MAGIC, dataset.count, dataset.rows, dataset.cols)
    return header + pixels.tobytes()


def load_idx_file(path: Path, split: str = "train") -> Dataset:
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    dataset = read_idx_images(raw, split=split)
    logger.info("loaded idx images", extra={"path": str(path), "count": dataset.count, "split": split})
    return dataset


def _find_split_file(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing {stem}[.gz] in {directory}")


def load_idx_directory(directory: Path) -> Tuple[Dataset, Dataset]:
    """Train and test images from an mnist/fashion style directory."""
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory not found: {directory}")
    train = load_idx_file(_find_split_file(directory, TRAIN_IMAGES), split="train")
    test = load_idx_file(_find_split_file(directory, TEST_IMAGES), split="test")
    return train, test


def save_idx_directory(directory: Path, train: Dataset, test: Dataset) -> List[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, dataset in ((TRAIN_IMAGES, train), (TEST_IMAGES, test)):
        path = directory / stem
        path.write_bytes(write_idx_images(dataset))
        written.append(path)
    return written


def correlated_field(
    count: int, side: int, rho_pix: float, seed: SeedLike, variance: float = FIELD_VARIANCE
) -> NDArray[np.float64]:
    """Pre-squash field with covariance variance * (AR(1) rows kron AR(1) columns).

    Every row is a stationary AR(1) sequence with coefficient rho_pix, and neighbouring
    rows are correlated by the same coefficient, so an image is mostly explained by a
    few smooth modes.
    """
    if side < 1:
        raise InvalidParameterError(f"side must be at least 1, got {side}")
    if count < 0:
        raise InvalidParameterError(f"count cannot be negative, got {count}")
    if not abs(rho_pix) < 1.0:
        raise InvalidParameterError(f"rho_pix must lie strictly inside (-1, 1), got {rho_pix}")
    if not (np.isfinite(variance) and variance > 0.0):
        raise InvalidParameterError(f"variance must be a positive real, got {variance}")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((count, side, side))
    rows = ar1_math.color_batch(rho_pix, 1.0, eps)
    return ar1_math.color_batch(rho_pix, variance, rows.swapaxes(1, 2)).swapaxes(1, 2)


def synth_correlated(
    count: int, side: int, rho_pix: float, seed: SeedLike, split: str = "train"
) -> Dataset:
    field = correlated_field(count, side, rho_pix, seed)
    images = 1.0 / (1.0 + np.exp(-field))
    return Dataset(images=images.reshape(count, side * side), rows=side, cols=side, split=split)


def synth_splits(
    train_count: int, test_count: int, side: int, rho_pix: float, seed: int
) -> Tuple[Dataset, Dataset]:
    train = synth_correlated(train_count, side, rho_pix, (seed, 0), split="train")
    test = synth_correlated(test_count, side, rho_pix, (seed, 1), split="test")
    return train, test


def lag1_autocorrelation(field: NDArray[np.float64]) -> float:
    """Pooled lag-1 sample autocorrelation along the last axis."""
    values = np.asarray(field, dtype=np.float64)
    centered = values - values.mean()
    lagged = centered[..., 1:] * centered[..., :-1]
    return float(np.mean(lagged) / np.mean(centered * centered))


def batches(dataset: Dataset, batch_size: int, epoch_seed: Optional[SeedLike]) -> List[NDArray[np.int64]]:
    """Seeded permutation of [0, count) cut into consecutive slices of batch_size."""
    if batch_size < 1:
        raise InvalidParameterError(f"batch_size must be at least 1, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(dataset.count)
    return [order[start : start + batch_size] for start in range(0, dataset.count, batch_size)]
