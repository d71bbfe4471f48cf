"""Dataset ingestion: raw IDX files, binarization, synthetic blobs, batching.

IDX layout (big-endian): two zero bytes, a type byte (only 0x08, unsigned
byte, is supported), a dimension-count byte, one uint32 per dimension,
then the payload. Compressed files must be decompressed beforehand.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .special_math import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_MAX_ITEMS = 2**31 - 1
_EPOCH_KEY = 2**32  # keeps epoch streams apart from rng.split() children


class IDXError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, features] float64
    labels: np.ndarray | None  # [n] int64
    name: str
    source_digest: int

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError(f"images must be 2-D, got shape {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.images)

    @property
    def n_features(self) -> int:
        return self.images.shape[1]


def digest64(*chunks: bytes) -> int:
    h = hashlib.blake2b(digest_size=8)
    for c in chunks:
        h.update(c)
    return int.from_bytes(h.digest(), "big")


def read_idx_array(buf: bytes) -> np.ndarray:
    """Decode an IDX buffer into a uint8 array of its declared shape."""
    buf = bytes(buf)
    if len(buf) < 4:
        raise IDXError(f"truncated header: {len(buf)} bytes")
    if buf[0] != 0 or buf[1] != 0:
        raise IDXError(f"bad magic {buf[:4].hex()}: first two bytes must be zero")
    if buf[2] != 0x08:
        raise IDXError(f"bad magic {buf[:4].hex()}: unsupported element type 0x{buf[2]:02x}")
    ndim = buf[3]
    if ndim == 0:
        raise IDXError("bad magic: zero dimensions")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IDXError(f"truncated header: need {header} bytes, have {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = math.prod(dims)
    if count > _MAX_ITEMS:
        raise IDXError(f"dimension overflow: {dims} holds {count} elements")
    have = len(buf) - header
    if have < count:
        raise IDXError(f"truncated payload: need {count} bytes, have {have}")
    if have > count:
        raise IDXError(f"{have - count} trailing bytes after payload")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims).copy()


def parse_idx(buf: bytes) -> np.ndarray:
    """Image files (3 dims) -> float64 [n, rows*cols] scaled by 1/255;
    label files (1 dim) -> int64 [n]."""
    buf = bytes(buf)
    arr = read_idx_array(buf)
    magic = int.from_bytes(buf[:4], "big")
    if magic == IMAGE_MAGIC:
        return arr.reshape(arr.shape[0], arr.shape[1] * arr.shape[2]).astype(np.float64) / 255.0
    if magic == LABEL_MAGIC:
        return arr.astype(np.int64)
    raise IDXError(f"bad magic 0x{magic:08x}: expected image (0x803) or label (0x801) file")


def serialize_idx(arr) -> bytes:
    """Encode an array as unsigned-byte IDX.

    Integer arrays are written as-is; float arrays are taken as intensities
    in [0, 1] and quantized to round(255 * x). A 2-D image matrix of
    square rows is written as [n, side, side].
    """
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        if arr.ndim == 2:
            side = math.isqrt(arr.shape[1])
            if side * side != arr.shape[1]:
                raise ValueError(f"cannot infer square images from width {arr.shape[1]}")
            arr = arr.reshape(arr.shape[0], side, side)
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0)
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"unsupported rank {arr.ndim}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("values must fit in an unsigned byte")
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(np.uint8).tobytes()


def load_idx_dataset(images_path, labels_path=None, name: str | None = None) -> Dataset:
    images_raw = Path(images_path).read_bytes()
    images = parse_idx(images_raw)
    if images.ndim != 2:
        raise IDXError(f"{images_path}: not an image file")
    chunks = [images_raw]
    labels = None
    if labels_path is not None:
        labels_raw = Path(labels_path).read_bytes()
        labels = parse_idx(labels_raw)
        if labels.ndim != 1:
            raise IDXError(f"{labels_path}: not a label file")
        chunks.append(labels_raw)
    return Dataset(images, labels, name or Path(images_path).name, digest64(*chunks))


def binarize(d: Dataset, threshold: float = 0.5) -> Dataset:
    """Map pixels to {0, 1}; values equal to the threshold go to 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return replace(d, images=(d.images >= threshold).astype(np.float64), name=f"{d.name}|bin{threshold:g}")


def take_first(d: Dataset, n: int) -> Dataset:
    if not 0 <= n <= len(d):
        raise ValueError(f"cannot take {n} items from a dataset of {len(d)}")
    labels = None if d.labels is None else d.labels[:n]
    return replace(d, images=d.images[:n], labels=labels)


def synthetic_blobs(rng: Rng, n_per_class: int, classes: int, dim: int, separation: float) -> Dataset:
    """Unit-variance Gaussian blobs, centers on a circle in the first two
    coordinates with neighbouring centers ``separation`` apart.

    Rows are grouped by class; shuffle at batching time.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if dim < 2:
        raise ValueError(f"need dim >= 2, got {dim}")
    radius = separation / (2.0 * math.sin(math.pi / classes))
    angles = 2.0 * math.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    labels = np.repeat(np.arange(classes), n_per_class)
    images = centers[labels] + rng.normal((len(labels), dim))
    name = f"blobs(c={classes},d={dim},sep={separation:g},n={n_per_class})"
    return Dataset(images, labels.astype(np.int64), name, digest64(images.tobytes(), labels.tobytes()))


def epoch_permutation(rng: Rng, n: int, epoch: int) -> np.ndarray:
    """Permutation for ``epoch``, a pure function of (rng seed, path, epoch)."""
    return Rng(rng.seed, rng.path + (_EPOCH_KEY + epoch,)).permutation(n)


def batch_iter(d: Dataset, batch_size: int, rng: Rng | None = None, shuffle: bool = False, epoch: int = 0):
    """Yield ``(images, labels)`` batches covering every item once."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(d)
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = epoch_permutation(rng, n, epoch)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield d.images[idx], None if d.labels is None else d.labels[idx]
