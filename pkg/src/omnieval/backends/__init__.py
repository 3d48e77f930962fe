from .base import (
    Backend,
    BackendCapabilities,
    GenerationOptions,
    LoglikelihoodResult,
    ModelResponse,
)
from .http import HttpBackend
from .stub import StubBackend

__all__ = [
    "Backend",
    "BackendCapabilities",
    "GenerationOptions",
    "LoglikelihoodResult",
    "ModelResponse",
    "HttpBackend",
    "StubBackend",
]
