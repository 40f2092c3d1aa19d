class ExtractorError(Exception):
    """Base class for everything this package raises on purpose."""


class DatasetError(ExtractorError):
    """Dataset directory missing, malformed, or too many unreadable images."""


class PromptListError(ExtractorError):
    """Prompt list fails coverage or format requirements."""


class EncoderError(ExtractorError):
    """The requested encoder cannot be constructed or applied."""
