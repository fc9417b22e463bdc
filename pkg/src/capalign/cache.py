"""Persistent store of frozen caption embeddings.

Captions are embedded once, offline, and training only ever reads the stored
vectors, so the text pathway costs nothing per step. The on-disk format is
bit-exact and language-neutral so external exporters can produce it:

    bytes 0-3    magic "LFTC"
    bytes 4-7    format version (u32 LE, =1)
    bytes 8-15   record_count (u64 LE)
    bytes 16-19  dim (u32 LE)
    byte  20     dtype code (0 = float32, 1 = bfloat16)
    byte  21     normalized flag (0/1)
    bytes 22-31  reserved, must be zero
    then         record_count x (id u64 LE, offset u64 LE), ascending by id
    then         vector payload in table order, dim x scalar-width bytes LE

Offsets are absolute file offsets of each vector's first byte; the payload is
contiguous in table order, and open() rejects files violating that layout.
Files are immutable once built: any number of readers may share one with no
coordination, and lookups return value copies.

bfloat16 is stored by truncating the low 16 bits of the float32 encoding
(round toward zero), so a stored value always decodes to exactly itself.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator, Tuple

import numpy as np

from .errors import (
    CacheError,
    CorruptCacheError,
    DimensionMismatchError,
    DuplicateIdError,
    UnknownIdError,
    ZeroVectorError,
)

MAGIC = b"LFTC"
FORMAT_VERSION = 1
HEADER_SIZE = 32
TABLE_ENTRY_SIZE = 16

DTYPE_FLOAT32 = 0
DTYPE_BFLOAT16 = 1
_DTYPE_CODES = {"float32": DTYPE_FLOAT32, "bfloat16": DTYPE_BFLOAT16}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}
_SCALAR_WIDTH = {DTYPE_FLOAT32: 4, DTYPE_BFLOAT16: 2}


def bfloat16_encode(vec: np.ndarray) -> np.ndarray:
    """float32 -> u16 payload by truncating the low 16 mantissa bits."""
    bits = np.ascontiguousarray(vec, dtype=np.float32).view(np.uint32)
    return (bits >> 16).astype(np.uint16)


def bfloat16_decode(raw: np.ndarray) -> np.ndarray:
    """u16 payload -> exact float32 values."""
    bits = raw.astype(np.uint32) << 16
    return bits.view(np.float32)


@dataclass(frozen=True)
class CacheHeader:
    record_count: int
    dim: int
    dtype_code: int
    normalized: bool
    version: int = FORMAT_VERSION

    @property
    def dtype_name(self) -> str:
        return _DTYPE_NAMES[self.dtype_code]

    @property
    def scalar_width(self) -> int:
        return _SCALAR_WIDTH[self.dtype_code]

    def pack(self) -> bytes:
        return (
            MAGIC
            + struct.pack("<I", self.version)
            + struct.pack("<Q", self.record_count)
            + struct.pack("<I", self.dim)
            + struct.pack("<BB", self.dtype_code, int(self.normalized))
            + b"\x00" * 10
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "CacheHeader":
        if len(raw) < HEADER_SIZE:
            raise CorruptCacheError(f"file too short for header ({len(raw)} bytes)")
        if raw[:4] != MAGIC:
            raise CorruptCacheError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
        version = struct.unpack_from("<I", raw, 4)[0]
        if version != FORMAT_VERSION:
            raise CorruptCacheError(f"unsupported format version {version}")
        record_count = struct.unpack_from("<Q", raw, 8)[0]
        dim = struct.unpack_from("<I", raw, 16)[0]
        dtype_code, norm_flag = struct.unpack_from("<BB", raw, 20)
        if dim < 1:
            raise CorruptCacheError(f"dim must be >= 1, got {dim}")
        if dtype_code not in _DTYPE_NAMES:
            raise CorruptCacheError(f"unknown dtype code {dtype_code}")
        if norm_flag not in (0, 1):
            raise CorruptCacheError(f"normalized flag must be 0/1, got {norm_flag}")
        if raw[22:32] != b"\x00" * 10:
            raise CorruptCacheError("reserved header bytes are not zero")
        return cls(record_count, dim, dtype_code, bool(norm_flag), version)


class EmbeddingCache:
    """Read-only view of a built cache file, memory-mapped for cheap lookups."""

    def __init__(self, path: str, header: CacheHeader, ids: np.ndarray, offsets: np.ndarray):
        self.path = path
        self.header = header
        self._ids = ids
        self._offsets = offsets
        self._data = np.memmap(path, dtype=np.uint8, mode="r")

    @classmethod
    def open(cls, path: str) -> "EmbeddingCache":
        size = os.path.getsize(path)
        with open(path, "rb") as f:
            header = CacheHeader.unpack(f.read(HEADER_SIZE))
            n = header.record_count
            expected = HEADER_SIZE + n * TABLE_ENTRY_SIZE + n * header.dim * header.scalar_width
            if size != expected:
                raise CorruptCacheError(
                    f"file size {size} does not match header (expected {expected})"
                )
            table = np.fromfile(f, dtype=np.dtype([("id", "<u8"), ("off", "<u8")]), count=n)
        if len(table) != n:
            raise CorruptCacheError("id table truncated")
        ids = table["id"].astype(np.uint64)
        offsets = table["off"].astype(np.uint64)
        if n > 0:
            if np.any(ids[1:] <= ids[:-1]):
                raise CorruptCacheError("id table is not strictly ascending")
            start = HEADER_SIZE + n * TABLE_ENTRY_SIZE
            stride = header.dim * header.scalar_width
            want = start + np.arange(n, dtype=np.uint64) * np.uint64(stride)
            if np.any(offsets != want):
                raise CorruptCacheError("payload offsets violate contiguous table order")
        return cls(path, header, ids, offsets)

    def __len__(self) -> int:
        return self.header.record_count

    @property
    def dim(self) -> int:
        return self.header.dim

    def ids(self) -> np.ndarray:
        """All record ids, ascending (a copy)."""
        return self._ids.copy()

    def _decode(self, offset: int) -> np.ndarray:
        width = self.header.scalar_width
        raw = self._data[offset : offset + self.dim * width]
        if self.header.dtype_code == DTYPE_FLOAT32:
            return np.frombuffer(raw, dtype="<f4").astype(np.float32)
        return bfloat16_decode(np.frombuffer(raw, dtype="<u2"))

    def lookup(self, record_id: int) -> np.ndarray:
        pos = int(np.searchsorted(self._ids, np.uint64(record_id)))
        if pos >= len(self._ids) or self._ids[pos] != np.uint64(record_id):
            raise UnknownIdError([record_id])
        return self._decode(int(self._offsets[pos]))

    def batch_gather(self, record_ids) -> np.ndarray:
        """Rows in the order given; raises listing *all* missing ids."""
        record_ids = list(record_ids)
        out = np.empty((len(record_ids), self.dim), dtype=np.float32)
        if not record_ids:
            return out
        wanted = np.asarray(record_ids, dtype=np.uint64)
        pos = np.searchsorted(self._ids, wanted)
        pos_clipped = np.minimum(pos, len(self._ids) - 1)
        found = self._ids[pos_clipped] == wanted
        found &= pos < len(self._ids)
        if not np.all(found):
            raise UnknownIdError([int(i) for i in wanted[~found]])
        for row, p in enumerate(pos):
            out[row] = self._decode(int(self._offsets[p]))
        return out

    def __iter__(self) -> Iterator[Tuple[int, np.ndarray]]:
        for i in range(len(self._ids)):
            yield int(self._ids[i]), self._decode(int(self._offsets[i]))

    def close(self) -> None:
        # memmap holds the file open until garbage-collected; drop our ref
        self._data = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _prepare_vector(record_id, vector, dim: int, normalize: bool) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != dim:
        raise DimensionMismatchError(dim, v.shape[0] if v.ndim == 1 else v.shape, record_id)
    if not np.all(np.isfinite(v)):
        raise CacheError(f"record id {record_id} has non-finite components")
    if normalize:
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ZeroVectorError(record_id)
        v = v / norm
    return v.astype(np.float32)


def build_cache(
    path: str,
    records: Iterable[Tuple[int, np.ndarray]],
    dim: int,
    dtype: str = "float32",
    normalize: bool = False,
) -> EmbeddingCache:
    """Persist a stream of (id, vector) records and return the opened cache.

    Single pass over the stream; vectors are spooled to a temp file so the
    stream never needs to fit in memory. On any failure the partially written
    output is removed.
    """
    if dim < 1:
        raise CorruptCacheError(f"dim must be >= 1, got {dim}")
    if dtype not in _DTYPE_CODES:
        raise CorruptCacheError(f"unknown dtype {dtype!r}")
    code = _DTYPE_CODES[dtype]
    width = _SCALAR_WIDTH[code]
    row_bytes = dim * width

    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    ids: list[int] = []
    seen: set[int] = set()
    spool = tempfile.TemporaryFile(dir=out_dir)
    tmp_path = path + ".tmp"
    try:
        for record_id, vector in records:
            record_id = int(record_id)
            if record_id in seen:
                raise DuplicateIdError(record_id)
            seen.add(record_id)
            v = _prepare_vector(record_id, vector, dim, normalize)
            if code == DTYPE_BFLOAT16:
                spool.write(bfloat16_encode(v).astype("<u2").tobytes())
            else:
                spool.write(v.astype("<f4").tobytes())
            ids.append(record_id)

        n = len(ids)
        order = sorted(range(n), key=ids.__getitem__)
        header = CacheHeader(n, dim, code, normalize)
        payload_start = HEADER_SIZE + n * TABLE_ENTRY_SIZE
        with open(tmp_path, "wb") as out:
            out.write(header.pack())
            for k, src in enumerate(order):
                out.write(struct.pack("<QQ", ids[src], payload_start + k * row_bytes))
            for src in order:
                spool.seek(src * row_bytes)
                out.write(spool.read(row_bytes))
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    finally:
        spool.close()
    return EmbeddingCache.open(path)


def validate_cache(path: str, deep: bool = False) -> CacheHeader:
    """Structural validation; with deep=True also checks finiteness and, for
    normalized caches, that every decoded vector has unit L2 norm (1e-3)."""
    cache = EmbeddingCache.open(path)
    try:
        if deep:
            count = 0
            for record_id, vec in cache:
                if not np.all(np.isfinite(vec)):
                    raise CorruptCacheError(f"record {record_id} has non-finite components")
                if cache.header.normalized:
                    norm = float(np.linalg.norm(vec.astype(np.float64)))
                    if abs(norm - 1.0) > 1e-3:
                        raise CorruptCacheError(
                            f"record {record_id} norm {norm:.6f} violates normalized flag"
                        )
                count += 1
            if count != cache.header.record_count:
                raise CorruptCacheError("iteration count disagrees with header")
        return cache.header
    finally:
        cache.close()


def cache_summary(path: str) -> str:
    header = validate_cache(path)
    info = {
        "records": header.record_count,
        "dim": header.dim,
        "dtype": header.dtype_name,
        "normalized": header.normalized,
    }
    return json.dumps(info)
