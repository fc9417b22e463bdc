"""Flat array container used for encoder checkpoints.

Layout: 8-byte little-endian header length, then a UTF-8 JSON header with two
keys ("meta": free-form config dict, "manifest": list of {name, shape, offset}
entries), then the payload: each array as little-endian float32, concatenated
in manifest order. offset is the byte position within the payload.

Writes go to a temp file in the target directory followed by an atomic rename,
so a crashed writer never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import CorruptCacheError


def save_arrays(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "manifest": manifest}).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise CorruptCacheError(f"container too short: {len(raw)} bytes")
    header_len = struct.unpack_from("<Q", raw, 0)[0]
    if 8 + header_len > len(raw):
        raise CorruptCacheError("container header extends past end of file")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
        meta = header["meta"]
        manifest = header["manifest"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptCacheError(f"bad container header: {exc}") from exc
    payload = raw[8 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CorruptCacheError(f"array {entry['name']!r} extends past payload end")
        flat = np.frombuffer(payload[start:end], dtype="<f4")
        arrays[entry["name"]] = flat.reshape(shape).astype(np.float32)
    return meta, arrays
