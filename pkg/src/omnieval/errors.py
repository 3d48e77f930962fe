"""Exception hierarchy shared across the harness."""


class EvalKitError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EvalKitError):
    """Invalid run configuration, template, or backend descriptor."""


# --- dataset loading -------------------------------------------------------

class ParseError(EvalKitError):
    """Dataset file is not well-formed JSON."""


class SchemaError(EvalKitError):
    """A dataset record violates the unified schema; message names the record and field."""


class EmptyDataset(EvalKitError):
    """Dataset file parsed but contains no records."""


# --- prompt rendering ------------------------------------------------------

class EmptyChoices(EvalKitError):
    """A choice block was requested for an empty choice list."""


class ChoiceOverflow(EvalKitError):
    """More than 26 choices; positional letters run out."""


# --- backends --------------------------------------------------------------

class BackendError(EvalKitError):
    """Base class for inference-backend failures."""


class TransportError(BackendError):
    """Connect failure, timeout, or 5xx from the backend. Retryable."""


class RateLimited(BackendError):
    """HTTP 429. Retryable; carries the server's retry-after hint in seconds."""

    def __init__(self, message, retry_after_s=None):
        super().__init__(message)
        self.retry_after_s = retry_after_s


class BackendRefused(BackendError):
    """4xx other than 429. Not retried."""


class MalformedReply(BackendError):
    """Backend reply missing required fields or not parseable."""


class UnsupportedCapability(BackendError):
    """Operation requested that the backend does not support."""


class AttachmentError(BackendError):
    """An image attachment could not be read. Per-item, not retried."""


# --- metrics and reporting -------------------------------------------------

class EmptyReferences(EvalKitError):
    """BLEU called with no references."""


class EmptyRun(EvalKitError):
    """Aggregation requested over zero records."""
