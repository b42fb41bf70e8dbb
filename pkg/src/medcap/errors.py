"""Exception taxonomy shared across the pipeline."""

from __future__ import annotations


class MedcapError(Exception):
    """Base class for every error raised by this package."""


class MalformedLabel(MedcapError):
    """Raised when a label string is empty or whitespace-only."""


class ParseFailure(MedcapError):
    """A model response contained no parseable JSON object.

    The offending raw text is kept on the exception for audit.
    """

    def __init__(self, message: str, raw: str) -> None:
        super().__init__(message)
        self.raw = raw


class SchemaViolation(ParseFailure):
    """A parsed JSON object was missing or had an empty required field."""

    def __init__(self, field: str, raw: str) -> None:
        super().__init__(f"missing or empty field: {field}", raw)
        self.field = field


class ConfigError(MedcapError):
    """Invalid or inconsistent run configuration."""


class IoError(MedcapError):
    """A required file could not be read or written."""


class InputError(MedcapError):
    """Caller passed arguments that violate an operation's preconditions."""


class EmptyInput(InputError):
    """An operation that requires at least one sample received none."""


class ImageDecodeError(MedcapError):
    """An image file exists but cannot be decoded."""


class EndpointError(MedcapError):
    """Base class for model-endpoint failures."""


class EndpointRejected(EndpointError):
    """The endpoint returned a non-retryable HTTP 4xx."""

    def __init__(self, message: str, status_code: int) -> None:
        super().__init__(message)
        self.status_code = status_code


class EndpointExhausted(EndpointError):
    """All retries against an endpoint failed."""

    def __init__(self, message: str, attempts: int) -> None:
        super().__init__(message)
        self.attempts = attempts


class MetricUnavailable(MedcapError):
    """A judge-driven metric could not be computed for one case."""

    def __init__(self, metric: str, reason: str) -> None:
        super().__init__(f"{metric}: {reason}")
        self.metric = metric
        self.reason = reason


class StageDependencyError(MedcapError):
    """A pipeline stage is missing a predecessor's output file."""

    def __init__(self, stage: str, missing: str) -> None:
        super().__init__(f"stage '{stage}' requires missing input: {missing}")
        self.stage = stage
        self.missing = missing


class RunLockedError(MedcapError):
    """Another process holds the run directory lock."""
