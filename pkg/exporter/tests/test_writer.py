"""Format conformance for the standalone cache writer.

Two independent routes: this package's own reader (same layout spec, shared
code) and the trainer package's reader/validator (separate codebase, the
authoritative consumer). The strongest check is byte-for-byte equality with
the trainer's writer on identical input.
"""

import os

import numpy as np
import pytest

from capalign.cache import EmbeddingCache, build_cache, validate_cache
from embed_exporter.errors import CacheFormatError
from embed_exporter.writer import (
    bfloat16_expand,
    bfloat16_truncate,
    read_cache,
    write_cache,
)


def _vecs(n, dim, seed=0):
    return np.random.default_rng(seed).standard_normal((n, dim)).astype(np.float32)


def test_roundtrip_sorts_by_id(tmp_path):
    path = str(tmp_path / "c.lftc")
    ids = [7, 3, 11, 0]
    vecs = _vecs(4, 5)
    write_cache(path, ids, vecs)
    info, got_ids, got_vecs = read_cache(path)
    assert info == {"record_count": 4, "dim": 5, "dtype": "float32",
                    "normalized": False}
    assert got_ids.tolist() == [0, 3, 7, 11]
    for row, cid in enumerate([0, 3, 7, 11]):
        assert np.array_equal(got_vecs[row], vecs[ids.index(cid)])


def test_empty_cache_roundtrip(tmp_path):
    path = str(tmp_path / "empty.lftc")
    write_cache(path, [], np.zeros((0, 3), dtype=np.float32))
    info, got_ids, got_vecs = read_cache(path)
    assert info["record_count"] == 0
    assert got_ids.size == 0 and got_vecs.shape == (0, 3)


def test_bfloat16_stores_truncation_exactly(tmp_path):
    path = str(tmp_path / "bf16.lftc")
    vecs = _vecs(6, 9, seed=1)
    write_cache(path, list(range(6)), vecs, dtype="bfloat16")
    info, _, got = read_cache(path)
    assert info["dtype"] == "bfloat16"
    expected = bfloat16_expand(bfloat16_truncate(vecs))
    assert np.array_equal(got, expected)
    nonzero = vecs != 0
    rel = np.abs(got[nonzero] - vecs[nonzero]) / np.abs(vecs[nonzero])
    assert float(rel.max()) <= 2.0**-7


@pytest.mark.parametrize(
    "ids, vecs, match",
    [
        ([1, 1], _vecs(2, 3), "duplicate id 1"),
        ([-1, 0], _vecs(2, 3), "non-negative"),
        ([0], _vecs(1, 3) * np.nan, "non-finite"),
        ([0, 1], _vecs(3, 3), "3 vectors"),
        ([0], _vecs(1, 3)[0], "must be"),
    ],
)
def test_write_rejects_bad_input(tmp_path, ids, vecs, match):
    path = str(tmp_path / "bad.lftc")
    with pytest.raises(CacheFormatError, match=match):
        write_cache(path, ids, vecs)
    assert not os.path.exists(path)
    assert not os.path.exists(path + ".tmp")


def test_write_rejects_unknown_dtype(tmp_path):
    with pytest.raises(CacheFormatError, match="float16"):
        write_cache(str(tmp_path / "x.lftc"), [0], _vecs(1, 2), dtype="float16")


def test_read_rejects_corruption(tmp_path):
    path = str(tmp_path / "c.lftc")
    write_cache(path, [1, 2], _vecs(2, 4))
    blob = open(path, "rb").read()
    bad_magic = str(tmp_path / "m.lftc")
    open(bad_magic, "wb").write(b"XXXX" + blob[4:])
    with pytest.raises(CacheFormatError, match="not a cache"):
        read_cache(bad_magic)
    short = str(tmp_path / "s.lftc")
    open(short, "wb").write(blob[:-5])
    with pytest.raises(CacheFormatError, match="size"):
        read_cache(short)


@pytest.mark.parametrize("dtype", ["float32", "bfloat16"])
def test_bytes_identical_to_trainer_writer(tmp_path, dtype):
    ids = [9, 2, 5, 14, 0]
    vecs = _vecs(5, 7, seed=3)
    ours = str(tmp_path / "ours.lftc")
    theirs = str(tmp_path / "theirs.lftc")
    write_cache(ours, ids, vecs, dtype=dtype)
    build_cache(theirs, zip(ids, vecs), dim=7, dtype=dtype).close()
    assert open(ours, "rb").read() == open(theirs, "rb").read()


def test_passes_trainer_validator_and_reader(tmp_path):
    path = str(tmp_path / "c.lftc")
    ids = [4, 1, 8]
    vecs = _vecs(3, 6, seed=2)
    write_cache(path, ids, vecs)
    header = validate_cache(path, deep=True)
    assert header.record_count == 3 and header.dim == 6
    assert not header.normalized
    with EmbeddingCache.open(path) as cache:
        for cid in ids:
            assert np.array_equal(cache.lookup(cid), vecs[ids.index(cid)])
