import gzip
import logging
import os
from dataclasses import dataclass

import numpy as np

from scotopic.errors import DatasetError
from scotopic.sensor.photon_sim import IntensityImage

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class ImageSet:
    """Labeled images, pixels (N, H, W, C) in [0, 1] and integer labels (N,)."""

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise DatasetError(f"pixels must be (N, H, W, C), got shape {self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise DatasetError(f"{self.labels.shape[0]} labels for {self.pixels.shape[0]} images")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DatasetError("pixel intensities must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def image(self, index: int) -> IntensityImage:
        return IntensityImage(self.pixels[index], label=int(self.labels[index]))

    def subset(self, n: int | None) -> "ImageSet":
        """First ``n`` examples; ``None`` or ``n >= len`` keeps everything."""
        if n is None or n >= len(self):
            return self
        if n < 1:
            raise DatasetError(f"subset size must be >= 1, got {n}")
        return ImageSet(self.pixels[:n], self.labels[:n])


def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise DatasetError(f"IDX file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, path: str, magic: int, dims: int) -> np.ndarray:
    size = 4 * (dims + 1)
    if len(raw) < size:
        raise DatasetError(f"{path}: truncated header, expected {size} bytes, got {len(raw)}")
    header = np.frombuffer(raw, dtype=">u4", count=dims + 1)
    if int(header[0]) != magic:
        raise DatasetError(f"{path}: bad magic 0x{int(header[0]):08x}, expected 0x{magic:08x}")
    return header[1:].astype(np.int64)


def _payload(raw: bytes, path: str, offset: int, count: int) -> np.ndarray:
    expected = offset + count
    if len(raw) < expected:
        raise DatasetError(f"{path}: truncated file, expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)


def load_idx(images_path: str, labels_path: str) -> ImageSet:
    """Reads an IDX image/label pair (raw or gzipped) into an ImageSet."""
    raw_images = _read_bytes(images_path)
    n, rows, cols = _header(raw_images, images_path, IMAGES_MAGIC, 3)
    pixels = _payload(raw_images, images_path, 16, int(n * rows * cols))

    raw_labels = _read_bytes(labels_path)
    (n_labels,) = _header(raw_labels, labels_path, LABELS_MAGIC, 1)
    labels = _payload(raw_labels, labels_path, 8, int(n_labels))

    if n != n_labels:
        raise DatasetError(f"count mismatch: {n} images in {images_path}, {n_labels} labels in {labels_path}")

    logger.info(f"Loaded {n} images of {rows}x{cols} from {images_path}")
    return ImageSet(
        pixels=(pixels.reshape(int(n), int(rows), int(cols), 1) / 255.0),
        labels=labels.astype(np.int64),
    )
