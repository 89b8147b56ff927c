"""Text-generation and embedding backends.

``ChatProvider`` and ``Embedder`` are the two seams the pipeline talks
through. The scripted provider and the lexical embedder are deterministic
offline implementations; the HTTP provider speaks a chat-completions-style
JSON protocol.
"""

from __future__ import annotations

import abc
import json
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    EmbeddingError,
    EmptyPromptError,
    GroveError,
    MalformedListError,
    NumberExtractionError,
    OverLengthPromptError,
    RefusalError,
    ScriptedProviderError,
    TransportError,
)
from .parsing import first_int_in_range, parse_list_items, tokenize
from .types import RetryPolicy, SamplingParams

DEFAULT_REFUSAL_PATTERNS = ("I'm sorry", "I cannot", "as an AI")


@dataclass(frozen=True)
class ProviderCapabilities:
    max_input_chars: int = 120_000
    supports_seed: bool = False


class ChatProvider(abc.ABC):
    """Single-turn text generation."""

    id: str = "chat"
    capabilities: ProviderCapabilities = ProviderCapabilities()

    @abc.abstractmethod
    def complete(self, prompt: str, sampling: SamplingParams) -> str:
        """Return the generated text for one prompt."""


class Embedder(abc.ABC):
    """Semantic encoder mapping a text span to a fixed-size vector."""

    id: str = "embedder"

    @property
    @abc.abstractmethod
    def dimension(self) -> int: ...

    @abc.abstractmethod
    def embed(self, text: str) -> np.ndarray: ...

    def fingerprint(self) -> dict[str, object]:
        return {"id": self.id, "dimension": self.dimension}


def detect_refusal(response: str, patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS) -> bool:
    """True iff any pattern occurs case-insensitively as a substring."""
    if not patterns:
        raise ValueError("refusal patterns must be non-empty")
    lowered = response.lower()
    return any(p.lower() in lowered for p in patterns)


def complete(
    provider: ChatProvider,
    prompt: str,
    sampling: SamplingParams,
    *,
    sink: list | None = None,
    stage: str = "",
    key: tuple = (),
    attempt: int = 0,
    refusal_patterns: Sequence[str] | None = None,
    parsed: str | None = None,
) -> str:
    """One generation call with validation and transcript recording.

    Every call, including failed refusals, is appended to ``sink`` (a list of
    call records, later folded into a run manifest).
    """
    if not prompt or not prompt.strip():
        raise EmptyPromptError("prompt must be non-empty")
    limit = provider.capabilities.max_input_chars
    if len(prompt) > limit:
        raise OverLengthPromptError(len(prompt), limit)
    response = provider.complete(prompt, sampling)
    if not response:
        raise GroveError(f"provider {provider.id!r} returned empty text")
    refused = refusal_patterns is not None and detect_refusal(response, refusal_patterns)
    if sink is not None:
        from .manifest import CallRecord  # local import to avoid a cycle

        sink.append(
            CallRecord(
                stage=stage,
                prompt=prompt,
                response=response,
                parsed="refusal" if refused else parsed,
                key=key,
                attempt=attempt,
            )
        )
    if refused:
        raise RefusalError(response)
    return response


def embed(embedder: Embedder, text: str) -> np.ndarray:
    """Embed one text span; the result has unit (or zero) L2 norm."""
    if not text or not text.strip():
        raise EmbeddingError("cannot embed empty text")
    vector = embedder.embed(text)
    if vector.shape != (embedder.dimension,):
        raise EmbeddingError(
            f"embedder {embedder.id!r} returned shape {vector.shape}, "
            f"expected ({embedder.dimension},)"
        )
    if not np.all(np.isfinite(vector)):
        raise EmbeddingError("embedding contains non-finite values")
    return vector


# --- retrying request helpers -----------------------------------------------

def complete_with_retries(
    provider: ChatProvider,
    prompt: str,
    sampling: SamplingParams,
    retry: RetryPolicy,
    *,
    sink: list | None = None,
    stage: str = "",
    key: tuple = (),
    refusal_patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS,
) -> str:
    """complete() with the refusal retry budget applied."""
    attempts = retry.max_refusal_retries + 1
    last: RefusalError | None = None
    for attempt in range(attempts):
        try:
            return complete(
                provider, prompt, sampling,
                sink=sink, stage=stage, key=key, attempt=attempt,
                refusal_patterns=refusal_patterns,
            )
        except RefusalError as err:
            last = err
    assert last is not None
    raise RefusalError(last.response, attempts=attempts)


def request_list(
    provider: ChatProvider,
    prompt: str,
    sampling: SamplingParams,
    retry: RetryPolicy,
    min_items: int,
    *,
    sink: list | None = None,
    stage: str = "",
    key: tuple = (),
    refusal_patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS,
) -> list[str]:
    """Ask for a list and re-ask while it parses to fewer than ``min_items``."""
    refusals_left = retry.max_refusal_retries
    malformed_left = retry.max_malformed_retries
    attempt = 0
    while True:
        try:
            response = complete(
                provider, prompt, sampling,
                sink=sink, stage=stage, key=key, attempt=attempt,
                refusal_patterns=refusal_patterns,
            )
        except RefusalError as err:
            if refusals_left == 0:
                raise RefusalError(err.response, attempts=attempt + 1)
            refusals_left -= 1
            attempt += 1
            continue
        items = parse_list_items(response)
        if len(items) >= min_items:
            if sink:
                sink[-1].parsed = f"{len(items)} item(s)"
            return items
        if malformed_left == 0:
            raise MalformedListError(min_items, len(items), response, attempts=attempt + 1)
        malformed_left -= 1
        attempt += 1


def request_int(
    provider: ChatProvider,
    prompt: str,
    sampling: SamplingParams,
    retry: RetryPolicy,
    low: int,
    high: int,
    *,
    sink: list | None = None,
    stage: str = "",
    key: tuple = (),
    refusal_patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS,
) -> int:
    """Ask until the response contains an integer in [low, high]."""
    refusals_left = retry.max_refusal_retries
    malformed_left = retry.max_malformed_retries
    attempt = 0
    while True:
        try:
            response = complete(
                provider, prompt, sampling,
                sink=sink, stage=stage, key=key, attempt=attempt,
                refusal_patterns=refusal_patterns,
            )
        except RefusalError as err:
            if refusals_left == 0:
                raise RefusalError(err.response, attempts=attempt + 1)
            refusals_left -= 1
            attempt += 1
            continue
        value = first_int_in_range(response, low, high)
        if value is not None:
            if sink:
                sink[-1].parsed = f"int={value}"
            return value
        if malformed_left == 0:
            raise NumberExtractionError(low, high, response, attempts=attempt + 1)
        malformed_left -= 1
        attempt += 1


# --- scripted provider -------------------------------------------------------

_GROUP_RE = re.compile(r"\{(\d+)\}")


@dataclass
class ScriptedRule:
    """pattern -> response template.

    ``mode`` is one of substring / regex / exact. In regex mode the response
    may interpolate capture groups as ``{1}``, ``{2}``, ... A rule with a
    ``times`` cap is skipped once used up, letting later rules answer repeats
    of the same prompt (responses then depend on global call order, so keep
    such scripts single-threaded).
    """

    pattern: str
    response: str
    mode: str = "substring"
    times: int | None = None
    uses: int = 0

    def __post_init__(self):
        if self.mode not in ("substring", "regex", "exact"):
            raise ValueError(f"unknown rule mode {self.mode!r}")
        if self.mode == "regex":
            self._compiled = re.compile(self.pattern, re.DOTALL)

    def try_render(self, prompt: str) -> str | None:
        if self.mode == "substring":
            return self.response if self.pattern in prompt else None
        if self.mode == "exact":
            return self.response if self.pattern == prompt else None
        match = self._compiled.search(prompt)
        if match is None:
            return None
        return _GROUP_RE.sub(lambda g: match.group(int(g.group(1))) or "", self.response)


class ScriptedProvider(ChatProvider):
    """Deterministic provider answering from an ordered rule list.

    With stateless rules (no ``times`` caps) the response is a pure function
    of the prompt, so concurrent callers see identical text regardless of
    interleaving; the call log is a consistent, lock-guarded interleaving.
    """

    def __init__(
        self,
        rules: Iterable[ScriptedRule],
        *,
        seed: int = 0,
        provider_id: str = "scripted",
        capabilities: ProviderCapabilities | None = None,
    ):
        self.rules = list(rules)
        self.seed = seed
        self.id = provider_id
        self.capabilities = capabilities or ProviderCapabilities(supports_seed=True)
        self._log: list[tuple[str, str, SamplingParams]] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> tuple[tuple[str, str, SamplingParams], ...]:
        with self._lock:
            return tuple(self._log)

    @property
    def call_count(self) -> int:
        with self._lock:
            return len(self._log)

    def complete(self, prompt: str, sampling: SamplingParams) -> str:
        with self._lock:
            for rule in self.rules:
                if rule.times is not None and rule.uses >= rule.times:
                    continue
                rendered = rule.try_render(prompt)
                if rendered is None:
                    continue
                rule.uses += 1
                self._log.append((prompt, rendered, sampling))
                return rendered
        raise ScriptedProviderError(f"no rule matches prompt: {prompt[:160]!r}")

    @classmethod
    def from_rules_file(cls, path: str | Path, **kwargs) -> "ScriptedProvider":
        """JSON list of {pattern, response, mode?, times?} objects."""
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, list):
            raise ValueError(f"{path}: rules file must hold a JSON list")
        rules = [
            ScriptedRule(
                pattern=entry["pattern"],
                response=entry["response"],
                mode=entry.get("mode", "substring"),
                times=entry.get("times"),
            )
            for entry in raw
        ]
        return cls(rules, **kwargs)

class TranscriptProvider(ScriptedProvider):
    """Replays recorded (prompt, response) pairs by exact prompt match.

    Repeats of one prompt are served FIFO; the final response sticks once the
    queue drains. Built from a run manifest, this reproduces the run that
    recorded it.
    """

    def __init__(self, pairs: Iterable[tuple[str, str]], *, provider_id: str = "transcript"):
        super().__init__([], provider_id=provider_id)
        self._queues: dict[str, deque[str]] = {}
        for prompt, response in pairs:
            self._queues.setdefault(prompt, deque()).append(response)

    def complete(self, prompt: str, sampling: SamplingParams) -> str:
        with self._lock:
            queue = self._queues.get(prompt)
            if not queue:
                raise ScriptedProviderError(f"transcript has no response for: {prompt[:160]!r}")
            response = queue.popleft() if len(queue) > 1 else queue[0]
            self._log.append((prompt, response, sampling))
            return response


# --- lexical embedder ---------------------------------------------------------

def hash_bucket(token: str, dimension: int) -> int:
    """Multiplicative 64-bit string hash folded into [0, dimension)."""
    h = 0
    for ch in token:
        h = (h * 31 + ord(ch)) & 0xFFFFFFFFFFFFFFFF
    return h % dimension


class LexicalEmbedder(Embedder):
    """Feature-hashed term-frequency vectors; stateless and deterministic."""

    def __init__(self, dimension: int = 256):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self._dimension = dimension
        self.id = f"lexical-{dimension}"

    @property
    def dimension(self) -> int:
        return self._dimension

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmbeddingError("cannot embed empty text")
        vector = np.zeros(self._dimension, dtype=np.float64)
        for token in tokenize(text):
            vector[hash_bucket(token, self._dimension)] += 1.0
        norm = float(np.linalg.norm(vector))
        if norm > 0.0:
            vector /= norm
        return vector


# --- remote HTTP provider ------------------------------------------------------

class HttpChatProvider(ChatProvider):
    """Chat-completions-style JSON endpoint.

    Transport errors (connection failures, non-2xx statuses) are retried up
    to three attempts with exponential backoff; refusals are content, never
    retried here.
    """

    ATTEMPTS = 3

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        *,
        timeout: float = 60.0,
        max_input_chars: int = 48_000,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.id = f"http:{model}"
        self.capabilities = ProviderCapabilities(max_input_chars=max_input_chars)
        if session is None:
            import requests

            session = requests.Session()
        self._session = session
        self._sleep = sleep

    def _payload(self, prompt: str, sampling: SamplingParams) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "top_p": sampling.nucleus_p,
            "temperature": sampling.temperature,
        }

    def complete(self, prompt: str, sampling: SamplingParams) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = self._payload(prompt, sampling)
        last_error: Exception | None = None
        for attempt in range(self.ATTEMPTS):
            try:
                response = self._session.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                status = getattr(response, "status_code", 0)
                if not (200 <= status < 300):
                    raise TransportError(f"HTTP {status} from {self.endpoint}")
                body = response.json()
                return body["choices"][0]["message"]["content"]
            except TransportError as err:
                last_error = err
            except (KeyError, IndexError, TypeError, ValueError) as err:
                raise TransportError(f"malformed completion payload: {err}") from err
            except Exception as err:  # requests.RequestException and stub errors
                last_error = TransportError(str(err))
            if attempt < self.ATTEMPTS - 1:
                self._sleep(0.5 * 2**attempt)
        assert last_error is not None
        raise last_error
