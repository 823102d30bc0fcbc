"""
Binary container used for model files, DCL messages and the patch cache.

Layout::

    b"DACLAB01" | u32 header length | UTF-8 JSON header | f32 LE payload | u32 CRC-32(payload)

The header carries the caller's manifest plus a ``tensors`` table of
``{name, shape, offset}`` entries (offsets in bytes into the payload).
All integers are little-endian.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DACLAB01"
_F32 = np.dtype("<f4")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode(manifest: dict, arrays: dict[str, np.ndarray]) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = dict(manifest)
    header["tensors"] = table
    header["payload_bytes"] = offset
    hbytes = canonical_json(header)
    payload = b"".join(chunks)
    return b"".join(
        [MAGIC, struct.pack("<I", len(hbytes)), hbytes, payload, struct.pack("<I", zlib.crc32(payload))]
    )


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise FormatError("container: bad magic or file too short")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    hstart = len(MAGIC) + 4
    if len(data) < hstart + hlen:
        raise FormatError(f"container: truncated header (need {hlen} bytes)")
    try:
        header = json.loads(data[hstart : hstart + hlen].decode("utf-8"))
        table = header["tensors"]
        nbytes = int(header["payload_bytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"container: malformed header ({exc})") from None
    pstart = hstart + hlen
    if len(data) != pstart + nbytes + 4:
        raise FormatError(
            f"container: expected {pstart + nbytes + 4} bytes, found {len(data)} (truncated or padded)"
        )
    payload = data[pstart : pstart + nbytes]
    (crc,) = struct.unpack_from("<I", data, pstart + nbytes)
    actual = zlib.crc32(payload)
    if crc != actual:
        raise FormatError(f"container: CRC mismatch (stored {crc:08x}, computed {actual:08x})")
    arrays = {}
    for entry in table:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        if off < 0 or off + 4 * count > nbytes:
            raise FormatError(f"container: tensor {entry['name']!r} overruns payload")
        arrays[entry["name"]] = (
            np.frombuffer(payload, dtype=_F32, count=count, offset=off).astype(np.float32).reshape(shape)
        )
    del header["tensors"], header["payload_bytes"]
    return header, arrays


def write(path, manifest: dict, arrays: dict[str, np.ndarray]) -> bytes:
    blob = encode(manifest, arrays)
    Path(path).write_bytes(blob)
    return blob


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"container: cannot read {path}: {exc}") from None
    return decode(data)
