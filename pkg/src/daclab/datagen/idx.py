"""Reader/writer for IDX ubyte files (the MNIST container format)."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .dataset import Dataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"idx: cannot read {path}: {exc}") from None
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"idx: {path} is too short for a header")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"idx: {path} has magic 0x{magic:08X}, expected 0x{expected_magic:08X}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"idx: {path} truncated in dimension table")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim :]
    if len(body) < count:
        raise FormatError(f"idx: {path} holds {len(body)} data bytes, header promises {count}")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    images = _parse(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise FormatError(
            f"idx: count mismatch, {len(images)} images in {images_path} vs {len(labels)} labels in {labels_path}"
        )
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    y = labels.astype(np.int64)
    n_classes = int(y.max()) + 1 if len(y) else 0
    return Dataset(x, y, np.zeros(len(y), dtype=bool), n_classes, name=name)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I", IMAGES_MAGIC) + struct.pack(">3I", *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">I", LABELS_MAGIC) + struct.pack(">I", len(labels)) + labels.tobytes()
    )
