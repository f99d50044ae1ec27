"""Chat-completion access with an on-disk response cache and a scripted mock.

The clustering loop talks to an :class:`LLMClient`. A client wraps an
:class:`LLMBackend` description; when ``backend.endpoint == "mock"`` the
client replays a :class:`MockScript` and never touches the network.
Live responses are appended to a JSONL cache keyed by
``sha256(model_id, prompt)`` so repeated prompts are served locally.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import httpx

from pcc.errors import EmptyResponse, NetworkError, ScriptExhausted

logger = logging.getLogger(__name__)

DEFAULT_CACHE_PATH = Path(".pcc_cache") / "llm_cache.jsonl"
MOCK_ENDPOINT = "mock"


@dataclass(frozen=True)
class LLMBackend:
    identity: str = "mock"
    endpoint: str = MOCK_ENDPOINT
    model_id: str = "mock-model"
    request_timeout: float = 60.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be > 0")

    @property
    def is_mock(self) -> bool:
        return self.endpoint == MOCK_ENDPOINT

    @classmethod
    def from_env(cls, model_id: str = "gpt-4o", **kwargs) -> "LLMBackend":
        """Live backend whose endpoint comes from ``LLM_ENDPOINT``."""
        endpoint = os.environ.get("LLM_ENDPOINT")
        if not endpoint:
            raise NetworkError("LLM_ENDPOINT is not set")
        return cls(identity="live", endpoint=endpoint, model_id=model_id, **kwargs)


def cache_key(model_id: str, prompt: str) -> str:
    payload = json.dumps([model_id, prompt], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptExchange:
    prompt_text: str
    response_text: str
    model_id: str
    cache_key: str
    timestamp: float

    def to_record(self) -> dict:
        return {
            "cache_key": self.cache_key,
            "model_id": self.model_id,
            "prompt": self.prompt_text,
            "response": self.response_text,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PromptExchange":
        return cls(
            prompt_text=rec["prompt"],
            response_text=rec["response"],
            model_id=rec["model_id"],
            cache_key=rec["cache_key"],
            timestamp=float(rec.get("timestamp", 0.0)),
        )


class ResponseCache:
    """Append-only JSONL cache of prompt exchanges.

    Readers work on an in-memory snapshot; writers append under a lock.
    ``path=None`` keeps the cache purely in memory.
    """

    def __init__(self, path: str | os.PathLike | None = DEFAULT_CACHE_PATH) -> None:
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._entries: dict[str, PromptExchange] = {}
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    ex = PromptExchange.from_record(json.loads(line))
                    self._entries[ex.cache_key] = ex

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> PromptExchange | None:
        return self._entries.get(key)

    def put(self, exchange: PromptExchange) -> None:
        with self._lock:
            self._entries[exchange.cache_key] = exchange
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(exchange.to_record(), ensure_ascii=False) + "\n")

    def clear(self, model_id: str | None = None) -> int:
        """Evict all entries, or only those of ``model_id``. Returns the eviction count."""
        with self._lock:
            if model_id is None:
                evicted = list(self._entries)
            else:
                evicted = [k for k, ex in self._entries.items() if ex.model_id == model_id]
            for k in evicted:
                del self._entries[k]
            if self.path is not None and (evicted or self.path.exists()):
                self.path.parent.mkdir(parents=True, exist_ok=True)
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                with open(tmp, "w", encoding="utf-8") as fh:
                    for ex in self._entries.values():
                        fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")
                os.replace(tmp, self.path)
            return len(evicted)


@dataclass
class MockScript:
    """Ordered canned responses.

    Each call advances through ``entries`` to the first entry at or after the
    cursor whose matcher matches the prompt (a plain string matches as a
    substring, a compiled pattern via ``search``). Skipped entries are
    consumed. Past the end, ``repeat_last`` replays the last response served
    and ``error`` raises :class:`ScriptExhausted`.
    """

    entries: list[tuple[str | re.Pattern, str]]
    exhaustion_policy: Literal["repeat_last", "error"] = "repeat_last"
    _cursor: int = field(default=0, init=False, repr=False)
    _last: str | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.exhaustion_policy not in ("repeat_last", "error"):
            raise ValueError(f"unknown exhaustion policy {self.exhaustion_policy!r}")

    def reset(self) -> None:
        self._cursor = 0
        self._last = None

    @staticmethod
    def _matches(matcher: str | re.Pattern, prompt: str) -> bool:
        if isinstance(matcher, re.Pattern):
            return matcher.search(prompt) is not None
        return matcher in prompt

    def respond(self, prompt: str) -> str:
        for i in range(self._cursor, len(self.entries)):
            matcher, response = self.entries[i]
            if self._matches(matcher, prompt):
                self._cursor = i + 1
                self._last = response
                return response
        self._cursor = len(self.entries)
        if self.exhaustion_policy == "repeat_last" and self._last is not None:
            return self._last
        raise ScriptExhausted(f"mock script exhausted after {len(self.entries)} entries")

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        """Build from ``{"entries": [{"match"|"regex": ..., "response": ...}], "exhaustion_policy": ...}``."""
        entries: list[tuple[str | re.Pattern, str]] = []
        for item in data["entries"]:
            if "regex" in item:
                entries.append((re.compile(item["regex"]), item["response"]))
            else:
                entries.append((item.get("match", ""), item["response"]))
        return cls(entries, data.get("exhaustion_policy", "repeat_last"))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MockScript":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class LLMClient:
    """Sends prompts to a backend and records every exchange in ``transcript``."""

    def __init__(
        self,
        backend: LLMBackend,
        *,
        script: MockScript | None = None,
        cache: ResponseCache | None = None,
        api_key: str | None = None,
        transport: httpx.BaseTransport | None = None,
        retry_delay: float = 0.5,
    ) -> None:
        if backend.is_mock and script is None:
            raise ValueError("a mock backend needs a MockScript")
        self.backend = backend
        self.script = script
        self.cache = cache if cache is not None else ResponseCache(None)
        self.api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        self.retry_delay = retry_delay
        self.network_requests = 0
        self.transcript: list[PromptExchange] = []
        self._transport = transport

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        key = cache_key(self.backend.model_id, prompt)
        if self.backend.is_mock:
            text = self.script.respond(prompt)
            if not text.strip():
                raise EmptyResponse("mock returned blank text")
        else:
            hit = self.cache.get(key)
            if hit is not None:
                text = hit.response_text
            else:
                text = self._request(prompt)
                self.cache.put(PromptExchange(prompt, text, self.backend.model_id, key, time.time()))
        self.transcript.append(PromptExchange(prompt, text, self.backend.model_id, key, time.time()))
        return text

    def clear_cache(self, model_id: str | None = None) -> int:
        return self.cache.clear(model_id)

    def _request(self, prompt: str) -> str:
        payload = {
            "model": self.backend.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last_exc: Exception | None = None
        with httpx.Client(transport=self._transport, timeout=self.backend.request_timeout) as http:
            for attempt in range(self.backend.max_retries + 1):
                self.network_requests += 1
                try:
                    resp = http.post(self.backend.endpoint, json=payload, headers=headers)
                    resp.raise_for_status()
                    text = resp.json()["choices"][0]["message"]["content"]
                except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                    last_exc = exc
                    logger.warning("llm request attempt %d failed: %s", attempt + 1, exc)
                    if attempt < self.backend.max_retries and self.retry_delay > 0:
                        time.sleep(self.retry_delay * (2**attempt))
                    continue
                if not text or not text.strip():
                    raise EmptyResponse(f"{self.backend.identity} returned blank text")
                return text
        raise NetworkError(
            f"{self.backend.identity}: {self.backend.max_retries + 1} attempts failed ({last_exc})"
        )
