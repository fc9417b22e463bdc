"""Exception types shared across the package.

Every error raised by capalign derives from CapalignError so callers (and the
CLI) can catch one type. Subclasses carry the identifiers needed to act on the
failure (offending ids, expected/actual shapes, tensor names).
"""

from __future__ import annotations


class CapalignError(Exception):
    """Base class for all capalign errors."""


class ConfigError(CapalignError):
    """A configuration violates its invariants."""


class ShapeError(CapalignError):
    def __init__(self, expected, actual, what: str = "array"):
        super().__init__(f"{what}: expected shape {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class RangeError(CapalignError):
    """A scalar argument is outside its documented range."""


class DegenerateInputError(CapalignError):
    """Input is structurally valid but numerically unusable (e.g. a zero row)."""


class EmptyBatchError(CapalignError):
    pass


class EmptyPoolError(CapalignError):
    pass


class InsufficientDataError(CapalignError):
    pass


class NumericError(CapalignError):
    """A non-finite value appeared where finite math is required."""


class IngestionError(CapalignError):
    """An input artifact (image file, record line) could not be read."""


class CacheError(CapalignError):
    """Base class for embedding-cache failures."""


class DuplicateIdError(CacheError):
    def __init__(self, record_id: int):
        super().__init__(f"duplicate record id {record_id}")
        self.record_id = record_id


class DimensionMismatchError(CacheError):
    def __init__(self, expected: int, actual: int, record_id=None):
        where = f" (record id {record_id})" if record_id is not None else ""
        super().__init__(f"expected vector dim {expected}, got {actual}{where}")
        self.expected = expected
        self.actual = actual
        self.record_id = record_id


class ZeroVectorError(CacheError):
    def __init__(self, record_id: int):
        super().__init__(f"record id {record_id} is a zero vector; cannot normalize")
        self.record_id = record_id


class UnknownIdError(CacheError):
    def __init__(self, missing_ids):
        ids = list(missing_ids)
        super().__init__(f"id(s) not present in cache: {ids}")
        self.missing_ids = ids


class CorruptCacheError(CacheError):
    """The file is not a valid cache (bad magic, truncation, layout violation)."""
