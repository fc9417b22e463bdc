"""Standalone writer (and verifying reader) for the LFTC cache format.

This module re-implements the byte layout from its documentation rather than
importing the training package, so the two codebases can only agree by both
honoring the format:

    bytes 0-3    magic "LFTC"
    bytes 4-7    format version (u32 LE, =1)
    bytes 8-15   record_count (u64 LE)
    bytes 16-19  dim (u32 LE)
    byte  20     dtype code (0 = float32, 1 = bfloat16)
    byte  21     normalized flag (0/1)
    bytes 22-31  reserved, must be zero
    then         record_count x (id u64 LE, offset u64 LE), ascending by id
    then         vector payload in table order, dim x scalar-width bytes LE

Offsets are absolute and the payload is contiguous in table order. bfloat16
is the high half of the float32 bit pattern (truncation toward zero), so a
stored value always decodes to exactly itself.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CacheFormatError

MAGIC = b"LFTC"
FORMAT_VERSION = 1
HEADER_SIZE = 32
TABLE_ENTRY_SIZE = 16
DTYPE_CODES = {"float32": 0, "bfloat16": 1}
SCALAR_WIDTH = {"float32": 4, "bfloat16": 2}


def bfloat16_truncate(vectors: np.ndarray) -> np.ndarray:
    """float32 array -> u16 payload keeping the high 16 bits."""
    bits = np.ascontiguousarray(vectors, dtype=np.float32).view(np.uint32)
    return (bits >> 16).astype(np.uint16)


def bfloat16_expand(raw: np.ndarray) -> np.ndarray:
    """u16 payload -> the exact float32 values it encodes."""
    return (raw.astype(np.uint32) << 16).view(np.float32)


def write_cache(path: str, ids, vectors, dtype: str = "float32",
                normalized: bool = False) -> None:
    """Write one cache file atomically (temp file, then rename into place).

    ids are non-negative unique integers; vectors is an (n, dim) array-like
    of finite floats. Records may arrive in any id order; the file's table is
    sorted and the payload follows table order, as the format requires.
    """
    if dtype not in DTYPE_CODES:
        raise CacheFormatError(f"unknown dtype {dtype!r}")
    vecs = np.asarray(vectors, dtype=np.float32)
    if vecs.ndim != 2 or vecs.shape[1] < 1:
        raise CacheFormatError(f"vectors must be (n, dim >= 1), got shape {vecs.shape}")
    if not np.all(np.isfinite(vecs)):
        bad = int(np.argwhere(~np.isfinite(vecs).all(axis=1))[0][0])
        raise CacheFormatError(f"row {bad} has non-finite components")
    id_list = [int(i) for i in ids]
    if len(id_list) != vecs.shape[0]:
        raise CacheFormatError(
            f"{len(id_list)} ids for {vecs.shape[0]} vectors")
    if any(i < 0 for i in id_list):
        raise CacheFormatError("ids must be non-negative")
    seen: set[int] = set()
    for i in id_list:
        if i in seen:
            raise CacheFormatError(f"duplicate id {i}")
        seen.add(i)

    n, dim = vecs.shape
    order = sorted(range(n), key=id_list.__getitem__)
    if dtype == "bfloat16":
        payload_rows = bfloat16_truncate(vecs)
    else:
        payload_rows = vecs
    width = SCALAR_WIDTH[dtype]
    payload_start = HEADER_SIZE + n * TABLE_ENTRY_SIZE

    header = (MAGIC
              + struct.pack("<I", FORMAT_VERSION)
              + struct.pack("<Q", n)
              + struct.pack("<I", dim)
              + struct.pack("<BB", DTYPE_CODES[dtype], int(normalized))
              + b"\x00" * 10)
    tmp_path = path + ".tmp"
    try:
        with open(tmp_path, "wb") as out:
            out.write(header)
            for k, src in enumerate(order):
                out.write(struct.pack("<QQ", id_list[src],
                                      payload_start + k * dim * width))
            for src in order:
                row = payload_rows[src]
                out.write(row.astype("<u2" if dtype == "bfloat16" else "<f4").tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def read_cache(path: str):
    """Read a cache back: (info dict, ids array, float32 vectors in table order).

    Used by this package's tests as a second, independent route through the
    format; the trainer package's reader is the authoritative consumer.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        raw = f.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE or raw[:4] != MAGIC:
            raise CacheFormatError(f"{path!r} is not a cache file")
        version = struct.unpack_from("<I", raw, 4)[0]
        if version != FORMAT_VERSION:
            raise CacheFormatError(f"unsupported format version {version}")
        n = struct.unpack_from("<Q", raw, 8)[0]
        dim = struct.unpack_from("<I", raw, 16)[0]
        code, norm_flag = struct.unpack_from("<BB", raw, 20)
        names = {v: k for k, v in DTYPE_CODES.items()}
        if code not in names:
            raise CacheFormatError(f"unknown dtype code {code}")
        dtype = names[code]
        width = SCALAR_WIDTH[dtype]
        expected = HEADER_SIZE + n * TABLE_ENTRY_SIZE + n * dim * width
        if size != expected:
            raise CacheFormatError(f"file size {size}, header implies {expected}")
        table = np.fromfile(f, dtype=np.dtype([("id", "<u8"), ("off", "<u8")]), count=n)
        if n > 0:
            if np.any(table["id"][1:] <= table["id"][:-1]):
                raise CacheFormatError("id table is not strictly ascending")
            start = HEADER_SIZE + n * TABLE_ENTRY_SIZE
            want = start + np.arange(n, dtype=np.uint64) * np.uint64(dim * width)
            if np.any(table["off"] != want):
                raise CacheFormatError("payload offsets are not contiguous")
        if dtype == "bfloat16":
            vecs = bfloat16_expand(np.fromfile(f, dtype="<u2", count=n * dim))
        else:
            vecs = np.fromfile(f, dtype="<f4", count=n * dim).astype(np.float32)
    info = {"record_count": int(n), "dim": int(dim), "dtype": dtype,
            "normalized": bool(norm_flag)}
    return info, table["id"].astype(np.uint64), vecs.reshape(n, dim)
