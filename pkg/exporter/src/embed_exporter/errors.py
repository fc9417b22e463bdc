class ExporterError(Exception):
    """Base for everything this package raises on purpose."""


class CacheFormatError(ExporterError):
    """A cache file (being written or read back) violates the byte format."""


class CaptionFileError(ExporterError):
    """The captions or labels input file is malformed."""


class TemplateError(ExporterError):
    """An anchor prompt template is unusable."""


class JobError(ExporterError):
    """An export job is misconfigured."""
