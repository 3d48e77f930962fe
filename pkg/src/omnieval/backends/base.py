"""Backend contract: a uniform surface for response generation and
loglikelihood scoring, independent of where the model actually runs.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum

from ..errors import ConfigError
from ..prompts import PromptBundle


class DecodingMode(str, Enum):
    GREEDY = "greedy"
    SAMPLE = "sample"
    BEAM = "beam"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class GenerationOptions:
    temperature: float = 0.0
    max_new_tokens: int = 512
    stop_sequences: tuple[str, ...] = ()
    decoding_mode: DecodingMode = DecodingMode.GREEDY
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be positive")
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))
        object.__setattr__(self, "decoding_mode", DecodingMode(self.decoding_mode))

    @property
    def effective_mode(self) -> DecodingMode:
        # temperature 0 always means greedy, whatever the configured mode says
        if self.temperature == 0:
            return DecodingMode.GREEDY
        return self.decoding_mode

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "stop_sequences": list(self.stop_sequences),
            "decoding_mode": self.decoding_mode.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationOptions":
        return cls(
            temperature=data.get("temperature", 0.0),
            max_new_tokens=data.get("max_new_tokens", 512),
            stop_sequences=tuple(data.get("stop_sequences", ())),
            decoding_mode=DecodingMode(data.get("decoding_mode", "greedy")),
            seed=data.get("seed"),
        )


@dataclass(frozen=True)
class ModelResponse:
    text: str
    finish_reason: FinishReason = FinishReason.STOP
    token_logprobs: tuple[tuple[str, float], ...] | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "finish_reason": self.finish_reason.value,
            "token_logprobs": [list(t) for t in self.token_logprobs] if self.token_logprobs else None,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelResponse":
        logprobs = data.get("token_logprobs")
        return cls(
            text=data["text"],
            finish_reason=FinishReason(data.get("finish_reason", "stop")),
            token_logprobs=tuple((t, lp) for t, lp in logprobs) if logprobs else None,
            prompt_tokens=data.get("prompt_tokens", 0),
            completion_tokens=data.get("completion_tokens", 0),
            latency_ms=data.get("latency_ms", 0),
        )


@dataclass(frozen=True)
class LoglikelihoodResult:
    total_logprob: float
    token_count: int
    continuation_chars: int

    def __post_init__(self):
        if not math.isfinite(self.total_logprob):
            raise ConfigError("total_logprob must be finite")
        if self.token_count < 1:
            raise ConfigError("token_count must be >= 1")
        if self.continuation_chars < 1:
            raise ConfigError("continuation_chars must be >= 1")

    @property
    def per_char_logprob(self) -> float:
        return self.total_logprob / self.continuation_chars

    def to_dict(self) -> dict:
        return {
            "total_logprob": self.total_logprob,
            "token_count": self.token_count,
            "continuation_chars": self.continuation_chars,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LoglikelihoodResult":
        return cls(data["total_logprob"], data["token_count"], data["continuation_chars"])


@dataclass(frozen=True)
class BackendCapabilities:
    supports_generation: bool
    supports_loglikelihood: bool
    supports_images: bool
    model_name: str

    def __post_init__(self):
        if not (self.supports_generation or self.supports_loglikelihood or self.supports_images):
            raise ConfigError("a backend must support at least one capability")

    def to_dict(self) -> dict:
        return {
            "supports_generation": self.supports_generation,
            "supports_loglikelihood": self.supports_loglikelihood,
            "supports_images": self.supports_images,
            "model_name": self.model_name,
        }


class Backend(ABC):
    """Inference backend. Implementations must be safe for concurrent calls;
    all per-request state lives in the request."""

    @abstractmethod
    def capabilities(self) -> BackendCapabilities: ...

    @abstractmethod
    def generate(self, bundle: PromptBundle, options: GenerationOptions) -> ModelResponse: ...

    @abstractmethod
    def loglikelihood(self, context: str, continuation: str) -> LoglikelihoodResult: ...
