"""Typed exceptions shared across the package."""
from __future__ import annotations


class CalldistillError(Exception):
    """Base class for all package-specific errors."""


# --- corpus ----------------------------------------------------------------

class MalformedRecordError(CalldistillError):
    """One or more corpus records could not be parsed.

    Carries the 1-based line numbers of every bad record so a single run
    surfaces the full damage instead of failing one line at a time.
    """

    def __init__(self, lines: list[int], details: list[str] | None = None):
        self.lines = list(lines)
        self.details = list(details or [])
        msg = f"malformed corpus records on lines {self.lines}"
        if self.details:
            msg += ": " + "; ".join(self.details[:5])
        super().__init__(msg)


class DuplicateDocIdError(CalldistillError):
    def __init__(self, doc_ids: list[str]):
        self.doc_ids = list(doc_ids)
        super().__init__(f"duplicate document ids: {self.doc_ids}")


class EmptyCorpusError(CalldistillError):
    pass


# --- teacher ---------------------------------------------------------------

class EmptyBatchError(CalldistillError):
    pass


class BatchTooLargeError(CalldistillError):
    def __init__(self, size: int, limit: int):
        self.size = size
        self.limit = limit
        super().__init__(f"batch of {size} sentences exceeds the limit of {limit}")


class EmptyTopicListError(CalldistillError):
    pass


class MalformedResponseError(CalldistillError):
    pass


class TransportError(CalldistillError):
    """A single request to the teacher or embedding service failed."""


class EndpointUnreachableError(CalldistillError):
    """All retries for a request were exhausted."""


class ResumeStateError(CalldistillError):
    """On-disk labeling state does not match the requested run."""


# --- topic reduction -------------------------------------------------------

class EmptyReductionError(CalldistillError):
    pass


class DimensionMismatchError(CalldistillError):
    def __init__(self, key: str | None = None, message: str | None = None):
        self.key = key
        super().__init__(message or f"vector dimension mismatch for {key!r}")


class KTooLargeError(CalldistillError):
    pass


class MissingEmbeddingError(CalldistillError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"no embedding available for {key!r}")


# --- embedding store -------------------------------------------------------

class CorruptEntryError(CalldistillError):
    def __init__(self, key: str, message: str | None = None):
        self.key = key
        super().__init__(message or f"corrupt embedding entry for {key!r}")


# --- neural core -----------------------------------------------------------

class DegenerateLayerError(CalldistillError):
    pass


class BatchTooSmallError(CalldistillError):
    pass


class NonFiniteLossError(CalldistillError):
    pass


class ShapeMismatchError(CalldistillError):
    pass


# --- training protocol -----------------------------------------------------

class TooFewSamplesError(CalldistillError):
    pass


class EmptyEvalSetError(CalldistillError):
    pass


class MissingPretrainLabelsError(CalldistillError):
    pass


class MissingDataError(CalldistillError):
    pass


# --- features --------------------------------------------------------------

class EmptyDocumentError(CalldistillError):
    pass


# --- analytics -------------------------------------------------------------

class MalformedReturnsError(CalldistillError):
    """One or more rows of a returns CSV could not be parsed.

    Carries the 1-based data-row numbers of every bad row so a single run
    surfaces the full damage instead of failing one row at a time.
    """

    def __init__(self, rows: list[int], details: list[str] | None = None):
        self.rows = list(rows)
        self.details = list(details or [])
        msg = f"malformed returns rows {self.rows}"
        if self.details:
            msg += ": " + "; ".join(self.details[:5])
        super().__init__(msg)


class MissingTopicError(CalldistillError):
    def __init__(self, topic: str):
        self.topic = topic
        super().__init__(f"scores do not cover required topic {topic!r}")


class NoOverlapError(CalldistillError):
    pass


# --- cli / config ----------------------------------------------------------

class ConfigError(CalldistillError):
    pass


class NothingToReportError(CalldistillError):
    pass
