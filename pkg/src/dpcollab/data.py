"""Dataset loading: IDX image/label files and synthetic Gaussian blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Batch:
    """Feature matrix (examples x input_dim, float64) with integer labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConfigurationError("features must be a 2-D matrix")
        if len(self.features) != len(self.labels):
            raise ConfigurationError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if len(self.labels) == 0:
            raise ConfigurationError("empty batch")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> "Batch":
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.features[idx], self.labels[idx])


def _read_exact(buf: bytes, offset: int, count: int, path, what: str) -> bytes:
    if offset + count > len(buf):
        raise FormatError(
            f"{path}: truncated reading {what} at byte offset {offset} "
            f"(need {count} bytes, have {len(buf) - offset})"
        )
    return buf[offset : offset + count]


def load_idx(images_path, labels_path) -> Batch:
    """Load an IDX image/label file pair (the de-facto MNIST layout).

    Big-endian u32 magic and dimension header, then raw u8 data. Pixels are
    scaled to [0, 1] and flattened row-major to rows*cols-wide features.
    """
    img_buf = Path(images_path).read_bytes()
    lbl_buf = Path(labels_path).read_bytes()

    header = _read_exact(img_buf, 0, 16, images_path, "image header")
    magic, count, rows, cols = struct.unpack(">IIII", header)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{images_path}: bad image magic 0x{magic:08x} at byte offset 0 "
            f"(expected 0x{IDX_IMAGE_MAGIC:08x})"
        )
    pixels = _read_exact(img_buf, 16, count * rows * cols, images_path, "pixel data")
    if len(img_buf) != 16 + count * rows * cols:
        raise FormatError(
            f"{images_path}: {len(img_buf) - 16 - count * rows * cols} trailing bytes "
            f"after offset {16 + count * rows * cols}"
        )

    lbl_header = _read_exact(lbl_buf, 0, 8, labels_path, "label header")
    lbl_magic, lbl_count = struct.unpack(">II", lbl_header)
    if lbl_magic != IDX_LABEL_MAGIC:
        raise FormatError(
            f"{labels_path}: bad label magic 0x{lbl_magic:08x} at byte offset 0 "
            f"(expected 0x{IDX_LABEL_MAGIC:08x})"
        )
    if lbl_count != count:
        raise FormatError(
            f"label count {lbl_count} != image count {count} "
            f"({labels_path} vs {images_path})"
        )
    labels = np.frombuffer(_read_exact(lbl_buf, 8, count, labels_path, "label data"), dtype=np.uint8)

    features = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64) / 255.0
    return Batch(features.reshape(count, rows * cols), labels.astype(np.int64))


def idx_header(images_path) -> tuple:
    """Parse only the (count, rows, cols) header of an IDX image file."""
    with open(images_path, "rb") as fh:
        header = fh.read(16)
    if len(header) < 16:
        raise FormatError(f"{images_path}: truncated header at byte offset {len(header)}")
    magic, count, rows, cols = struct.unpack(">IIII", header)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad image magic 0x{magic:08x} at byte offset 0")
    return count, rows, cols


def write_idx(images_path, labels_path, batch: Batch, rows: int, cols: int) -> None:
    """Write a Batch back out as an IDX pair (test fixtures, demos)."""
    if rows * cols != batch.features.shape[1]:
        raise ConfigurationError("rows*cols must equal the feature width")
    pixels = np.clip(np.rint(batch.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, len(batch), rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, len(batch)))
        fh.write(batch.labels.astype(np.uint8).tobytes())


def synth_blobs(num_classes: int, dim: int, per_class: int, spread: float, seed: int, center_seed: int | None = None) -> Batch:
    """Gaussian clusters around per-class centers, shuffled, seeded.

    Centers are standard-normal draws (distinct with probability 1); each
    example is center + spread * N(0, I). spread=0 collapses every example
    onto its class center. center_seed pins the centers independently of the
    example draws, so several shards can share one underlying task.
    """
    if num_classes < 1 or dim < 1 or per_class < 1:
        raise ConfigurationError("num_classes, dim and per_class must be positive")
    if spread < 0:
        raise ConfigurationError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    if center_seed is None:
        centers = rng.normal(size=(num_classes, dim))
    else:
        centers = np.random.default_rng(center_seed).normal(size=(num_classes, dim))
    features = np.repeat(centers, per_class, axis=0)
    features = features + spread * rng.normal(size=features.shape)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    order = rng.permutation(len(labels))
    return Batch(features[order], labels[order])


def round_robin_indices(total: int, batch_size: int, iteration: int) -> np.ndarray:
    """Deterministic batch selection: contiguous wrap-around slices.

    iteration is 1-based; iteration t covers [(t-1)*b, t*b) modulo the shard
    size, so every run of a fixed config touches the same examples.
    """
    if batch_size < 1 or total < 1:
        raise ConfigurationError("batch_size and total must be positive")
    start = (iteration - 1) * batch_size
    return (start + np.arange(batch_size)) % total
