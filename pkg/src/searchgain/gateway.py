"""Text-generation clients behind one tiny protocol.

Every client exposes ``generate(request) -> GenerationResponse`` and an
``identity`` string used for cache keys.  Implementations:

- ScriptedClient: canned responses from an ordered queue or a
  prompt-substring map, for tests and fixtures.
- HttpClient: a chat/completions-style HTTP endpoint with bounded retries,
  exponential backoff, and an in-flight cap.
- RecordingClient / ReplayClient: capture live responses keyed by a request
  hash and replay them byte-identically offline.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_new_tokens: int = 256
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not isinstance(self.stop_sequences, tuple):
            object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "max_new_tokens": self.max_new_tokens,
            "temperature": self.temperature,
            "stop_sequences": list(self.stop_sequences),
        }


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    usage: TokenUsage = TokenUsage()


class GatewayError(RuntimeError):
    """Base class for generation-service failures."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class UnreachableError(GatewayError):
    """The endpoint could not be reached or rejected the request."""


class GatewayTimeout(GatewayError):
    """The endpoint did not answer within the configured timeout."""


class MalformedResponse(GatewayError):
    """The endpoint answered with an unparsable payload."""


class ScriptExhausted(GatewayError):
    """A scripted client ran out of canned responses."""


class UnseenRequest(GatewayError):
    """Replay was asked for a request that was never recorded."""


def truncate_at_stop(text: str, stop_sequences) -> str:
    """Cut the completion at the earliest stop sequence, excluding it."""
    cut = len(text)
    for stop in stop_sequences:
        if not stop:
            continue
        idx = text.find(stop)
        if idx != -1:
            cut = min(cut, idx)
    return text[:cut]


def request_fingerprint(request: GenerationRequest) -> str:
    """Stable hash of a request's full content and sampling parameters."""
    canonical = json.dumps(request.to_dict(), sort_keys=True, ensure_ascii=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _approx_usage(request: GenerationRequest, text: str) -> TokenUsage:
    return TokenUsage(len(request.prompt.split()), len(text.split()))


class ScriptedClient:
    """Canned responses for offline runs and tests.

    Exactly one source resolves each call, checked in order: the response
    queue (exhausting it is an error so test drift gets caught), then the
    first ``by_prompt`` key found inside the prompt (insertion order), then
    ``default``.  Thread safe; keeps a log of served requests.
    """

    def __init__(
        self,
        responses=None,
        by_prompt: dict[str, str] | None = None,
        default: str | None = None,
        label: str = "scripted",
    ):
        self._queue = deque(responses) if responses is not None else None
        self._by_prompt = dict(by_prompt) if by_prompt else {}
        self._default = default
        self._label = label
        self._lock = threading.Lock()
        self.requests: list[GenerationRequest] = []

    @property
    def identity(self) -> str:
        return self._label

    @property
    def call_count(self) -> int:
        return len(self.requests)

    def _resolve(self, request: GenerationRequest) -> str:
        if self._queue is not None:
            if not self._queue:
                raise ScriptExhausted(f"scripted client {self._label!r}: response queue exhausted")
            return self._queue.popleft()
        for key, response in self._by_prompt.items():
            if key in request.prompt:
                return response
        if self._default is not None:
            return self._default
        raise ScriptExhausted(
            f"scripted client {self._label!r}: no scripted response matches the prompt"
        )

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.requests.append(request)
            text = self._resolve(request)
        text = truncate_at_stop(text, request.stop_sequences)
        return GenerationResponse(text, _approx_usage(request, text))


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = ""
    timeout_s: float = 30.0
    max_in_flight: int = 16
    retries: int = 3
    backoff_s: float = 0.5

    @property
    def identity(self) -> str:
        return f"{self.model}@{self.base_url}"


class _TransportError(Exception):
    """Internal marker for retryable transport failures."""

    def __init__(self, message: str, timed_out: bool = False):
        super().__init__(message)
        self.timed_out = timed_out


def _requests_transport(url, payload, headers, timeout):
    import requests

    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.Timeout as exc:
        raise _TransportError(str(exc), timed_out=True) from exc
    except requests.RequestException as exc:
        raise _TransportError(str(exc)) from exc
    try:
        body = resp.json()
    except ValueError:
        body = None
    return resp.status_code, body


class HttpClient:
    """Chat/completions-style HTTP client.

    Retries up to ``retries`` attempts with exponential backoff starting at
    ``backoff_s`` on transport failures and 5xx statuses; 4xx statuses fail
    immediately.  At most ``max_in_flight`` requests run concurrently.  The
    API key is read from the environment at call time and never stored.
    """

    def __init__(self, config: EndpointConfig, transport=None, sleep=time.sleep):
        self.config = config
        self._transport = transport or _requests_transport
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(config.max_in_flight)

    @property
    def identity(self) -> str:
        return self.config.identity

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            import os

            key = os.environ.get(self.config.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        url = self.config.base_url.rstrip("/") + "/v1/chat/completions"

        last_error: str = ""
        timed_out = False
        for attempt in range(1, self.config.retries + 1):
            if attempt > 1:
                self._sleep(self.config.backoff_s * 2 ** (attempt - 2))
            try:
                with self._gate:
                    status, body = self._transport(url, payload, self._headers(), self.config.timeout_s)
            except _TransportError as exc:
                last_error = str(exc)
                timed_out = exc.timed_out
                continue
            if 400 <= status < 500:
                raise UnreachableError(
                    f"{self.identity}: request rejected with status {status}", attempts=attempt
                )
            if status >= 500:
                last_error = f"server error {status}"
                timed_out = False
                continue
            return self._parse(body, request, attempt)
        if timed_out:
            raise GatewayTimeout(
                f"{self.identity}: timed out after {self.config.retries} attempts ({last_error})",
                attempts=self.config.retries,
            )
        raise UnreachableError(
            f"{self.identity}: unreachable after {self.config.retries} attempts ({last_error})",
            attempts=self.config.retries,
        )

    def _parse(self, body, request: GenerationRequest, attempt: int) -> GenerationResponse:
        try:
            text = body["choices"][0]["message"]["content"]
            if not isinstance(text, str):
                raise TypeError("content is not a string")
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(
                f"{self.identity}: unexpected response shape ({exc})", attempts=attempt
            ) from exc
        usage = body.get("usage") or {}
        text = truncate_at_stop(text, request.stop_sequences)
        return GenerationResponse(
            text,
            TokenUsage(
                int(usage.get("prompt_tokens", 0)),
                int(usage.get("completion_tokens", 0)),
            ),
        )


class RecordingClient:
    """Wraps a client, appending (hash, request, response) lines to a file."""

    def __init__(self, inner, path: str | Path):
        self._inner = inner
        self._path = Path(path)
        self._lock = threading.Lock()

    @property
    def identity(self) -> str:
        return self._inner.identity

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        response = self._inner.generate(request)
        record = {
            "hash": request_fingerprint(request),
            "request": request.to_dict(),
            "response": {
                "text": response.text,
                "usage": {
                    "prompt_tokens": response.usage.prompt_tokens,
                    "completion_tokens": response.usage.completion_tokens,
                },
            },
        }
        line = json.dumps(record, sort_keys=True, ensure_ascii=True)
        with self._lock:
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return response


class ReplayClient:
    """Serves recorded responses by request hash, FIFO per hash.

    A request whose hash was never recorded, or whose recorded responses
    are already used up, raises UnseenRequest.
    """

    def __init__(self, path: str | Path):
        self._path = Path(path)
        self._by_hash: dict[str, deque] = {}
        self._lock = threading.Lock()
        with open(self._path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                self._by_hash.setdefault(record["hash"], deque()).append(record["response"])

    @property
    def identity(self) -> str:
        return f"replay:{self._path.name}"

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        digest = request_fingerprint(request)
        with self._lock:
            bucket = self._by_hash.get(digest)
            if not bucket:
                raise UnseenRequest(
                    f"replay has no (remaining) response for request {digest[:12]}..."
                )
            payload = bucket.popleft()
        usage = payload.get("usage") or {}
        return GenerationResponse(
            payload["text"],
            TokenUsage(
                int(usage.get("prompt_tokens", 0)),
                int(usage.get("completion_tokens", 0)),
            ),
        )
