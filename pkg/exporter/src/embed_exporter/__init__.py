"""Export caption embeddings from pretrained text encoders into cache files
the training pipeline can consume. Shares the cache byte format with the
trainer by contract, not by code."""

from .errors import (
    CacheFormatError,
    CaptionFileError,
    ExporterError,
    JobError,
    TemplateError,
)
from .export import (
    DEFAULT_MODEL,
    DEFAULT_TEMPLATE,
    ExportJob,
    export,
    export_anchors,
    read_captions,
    read_labels,
)
from .writer import read_cache, write_cache

__all__ = [
    "CacheFormatError",
    "CaptionFileError",
    "DEFAULT_MODEL",
    "DEFAULT_TEMPLATE",
    "ExportJob",
    "ExporterError",
    "JobError",
    "TemplateError",
    "export",
    "export_anchors",
    "read_cache",
    "read_captions",
    "read_labels",
    "write_cache",
]
