"""HTTP inference backend speaking the OpenAI-compatible wire protocol:
``POST /v1/chat/completions`` for generation and ``POST /v1/completions``
with echoed logprobs for loglikelihood scoring.

Request construction and reply parsing are pure functions so the wire format
can be pinned by golden tests without a server.
"""

from __future__ import annotations

import base64
import json
import mimetypes
import os
import time
from pathlib import Path

import requests

from ..errors import (
    AttachmentError,
    BackendRefused,
    MalformedReply,
    RateLimited,
    TransportError,
    UnsupportedCapability,
)
from ..prompts import PromptBundle
from .base import (
    Backend,
    BackendCapabilities,
    DecodingMode,
    FinishReason,
    GenerationOptions,
    LoglikelihoodResult,
    ModelResponse,
)

DEFAULT_API_KEY_ENV = "OMNIEVAL_API_KEY"

_FINISH_REASONS = {"stop": FinishReason.STOP, "length": FinishReason.LENGTH}


def encode_image(path: str) -> str:
    """Read an image file into a base64 data URI. Raises AttachmentError so a
    bad path fails that item instead of the whole run."""
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise AttachmentError(f"cannot read attachment {path!r}: {exc}") from exc
    mime = mimetypes.guess_type(path)[0] or "application/octet-stream"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def build_chat_request(model: str, bundle: PromptBundle, options: GenerationOptions) -> dict:
    """Chat-completions body for a conversation. Attachments become image_url
    content parts on their turn."""
    messages = []
    if bundle.system_text:
        messages.append({"role": "system", "content": bundle.system_text})
    for turn in bundle.turns:
        if turn.attachments:
            content = [{"type": "text", "text": turn.text}]
            for path in turn.attachments:
                content.append({"type": "image_url", "image_url": {"url": encode_image(path)}})
            messages.append({"role": turn.role, "content": content})
        else:
            messages.append({"role": turn.role, "content": turn.text})
    body = {
        "model": model,
        "messages": messages,
        "temperature": 0.0 if options.effective_mode is DecodingMode.GREEDY else options.temperature,
        "max_tokens": options.max_new_tokens,
    }
    if options.stop_sequences:
        body["stop"] = list(options.stop_sequences)
    if options.seed is not None:
        body["seed"] = options.seed
    return body


def build_completions_request(model: str, prompt: str) -> dict:
    """Completions body that echoes the prompt with per-token logprobs and
    generates nothing; the caller sums the continuation span."""
    return {
        "model": model,
        "prompt": prompt,
        "max_tokens": 0,
        "temperature": 0.0,
        "echo": True,
        "logprobs": 0,
    }


def parse_chat_response(payload: dict, latency_ms: int = 0) -> ModelResponse:
    try:
        choice = payload["choices"][0]
        message = choice["message"]
        text = message.get("content")
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedReply(f"chat reply missing choices/message: {exc!r}") from exc
    if not isinstance(text, str):
        raise MalformedReply("chat reply has no text content")
    finish = _FINISH_REASONS.get(choice.get("finish_reason"), FinishReason.ERROR)
    usage = payload.get("usage") or {}
    logprobs = None
    lp_content = (choice.get("logprobs") or {}).get("content")
    if lp_content:
        try:
            logprobs = tuple((entry["token"], float(entry["logprob"])) for entry in lp_content)
        except (KeyError, TypeError) as exc:
            raise MalformedReply(f"chat reply logprobs malformed: {exc!r}") from exc
    return ModelResponse(
        text=text,
        finish_reason=finish,
        token_logprobs=logprobs,
        prompt_tokens=int(usage.get("prompt_tokens", 0)),
        completion_tokens=int(usage.get("completion_tokens", 0)),
        latency_ms=latency_ms,
    )


def parse_completions_logprobs(payload: dict, context_chars: int, continuation: str) -> LoglikelihoodResult:
    """Sum echoed token logprobs over the continuation span.

    A token belongs to the continuation when its character span ends past the
    context/continuation boundary; tokens straddling the boundary are
    attributed to the continuation. The first echoed token's logprob may be
    null and counts as 0.
    """
    try:
        lp = payload["choices"][0]["logprobs"]
        tokens = lp["tokens"]
        token_logprobs = lp["token_logprobs"]
        offsets = lp["text_offset"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedReply(f"completions reply missing echoed logprobs: {exc!r}") from exc
    if not (len(tokens) == len(token_logprobs) == len(offsets)):
        raise MalformedReply("completions reply logprob arrays disagree in length")

    total = 0.0
    count = 0
    for token, logprob, offset in zip(tokens, token_logprobs, offsets):
        if offset + len(token) <= context_chars:
            continue
        total += float(logprob) if logprob is not None else 0.0
        count += 1
    if count == 0:
        raise MalformedReply("no echoed tokens cover the continuation span")
    return LoglikelihoodResult(total, count, len(continuation))


def _requests_transport(url: str, body: dict, headers: dict, timeout_s: float):
    try:
        resp = requests.post(url, json=body, headers=headers, timeout=timeout_s)
    except requests.exceptions.RequestException as exc:
        raise TransportError(f"request to {url} failed: {exc}") from exc
    return resp.status_code, dict(resp.headers), resp.text


class HttpBackend(Backend):
    """OpenAI-compatible HTTP backend.

    ``transport`` is injectable for tests: a callable of
    (url, body, headers, timeout_s) returning (status, headers, text).
    """

    def __init__(
        self,
        base_url: str,
        model_name: str,
        *,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        supports_generation: bool = True,
        supports_loglikelihood: bool = True,
        supports_images: bool = False,
        timeout_s: float = 120.0,
        transport=None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self._transport = transport or _requests_transport
        self._caps = BackendCapabilities(
            supports_generation, supports_loglikelihood, supports_images, model_name
        )

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, endpoint: str, body: dict) -> dict:
        url = f"{self.base_url}{endpoint}"
        status, headers, text = self._transport(url, body, self._headers(), self.timeout_s)
        if status == 429:
            retry_after = headers.get("Retry-After") or headers.get("retry-after")
            try:
                retry_after_s = float(retry_after) if retry_after is not None else None
            except ValueError:
                retry_after_s = None
            raise RateLimited(f"{url}: rate limited (429)", retry_after_s=retry_after_s)
        if 400 <= status < 500:
            raise BackendRefused(f"{url}: backend refused with status {status}: {text[:200]}")
        if status >= 500:
            raise TransportError(f"{url}: server error {status}")
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedReply(f"{url}: reply is not JSON: {exc}") from exc

    def generate(self, bundle: PromptBundle, options: GenerationOptions) -> ModelResponse:
        if not self._caps.supports_generation:
            raise UnsupportedCapability(f"{self.model_name} does not support generation")
        if any(turn.attachments for turn in bundle.turns) and not self._caps.supports_images:
            raise UnsupportedCapability(f"{self.model_name} does not accept image attachments")
        if options.effective_mode is DecodingMode.BEAM:
            raise UnsupportedCapability("beam decoding is not expressible on this wire protocol")
        body = build_chat_request(self.model_name, bundle, options)
        start = time.monotonic()
        payload = self._post("/v1/chat/completions", body)
        latency_ms = int((time.monotonic() - start) * 1000)
        return parse_chat_response(payload, latency_ms)

    def loglikelihood(self, context: str, continuation: str) -> LoglikelihoodResult:
        if not self._caps.supports_loglikelihood:
            raise UnsupportedCapability(f"{self.model_name} does not support loglikelihood")
        if not continuation:
            raise ValueError("continuation must be non-empty")
        body = build_completions_request(self.model_name, context + continuation)
        payload = self._post("/v1/completions", body)
        return parse_completions_logprobs(payload, len(context), continuation)
