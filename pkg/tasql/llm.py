"""
Prompt assembly and the completion gateway.

The gateway sits between the pipeline and a chat-completions backend. Every response is
kept in an append-only JSONL cache keyed by a hash of (prompt, decoding config, model id),
so a recorded run can be replayed offline and byte-for-byte.
"""

from __future__ import annotations

import os
import pathlib
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass
from datetime import datetime, timezone
from functools import lru_cache
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import requests

from .errors import BackendError, ConfigError, PreconditionError, ReplayMissError
from .utils import PROMPTS, content_hash, iter_jsonl, jsonl_line, read_text

MODES = ("live", "record", "replay")
TEMPLATE_SEPARATOR = "----"


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 800

    def __post_init__(self) -> None:
        if int(self.max_tokens) <= 0:
            raise PreconditionError("max_tokens must be positive")

    def as_dict(self) -> Dict[str, Any]:
        return {"temperature": self.temperature, "top_p": self.top_p, "max_tokens": self.max_tokens}


@dataclass(frozen=True)
class PromptBundle:
    instruction: str
    demonstrations: Tuple[Tuple[str, str], ...] = ()
    input: str = ""

    @property
    def shots(self) -> int:
        return len(self.demonstrations)


@dataclass(frozen=True)
class PromptStrategy:
    """Which familiar task a pipeline stage is recast as, and the template that encodes it."""

    stage: str
    aligned_task: str
    aligned_task_template: str


STRATEGIES: Dict[str, PromptStrategy] = {
    "schema_linking": PromptStrategy("schema_linking", "sql_generation", "dummy_sql.txt"),
    "logical_synthesis": PromptStrategy("logical_synthesis", "dataframe_analysis", "symbolic_plan.txt"),
}


def strategy_for(stage: str) -> PromptStrategy:
    try:
        return STRATEGIES[stage]
    except KeyError:
        raise PreconditionError(f"unknown pipeline stage '{stage}'") from None


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str
    body: str


@lru_cache(maxsize=None)
def _load_template_cached(path: str) -> PromptTemplate:
    text = read_text(path).replace("\r\n", "\n")
    lines = text.split("\n")
    if TEMPLATE_SEPARATOR not in lines:
        return PromptTemplate(instruction=text.strip(), body="")
    cut = lines.index(TEMPLATE_SEPARATOR)
    return PromptTemplate(
        instruction="\n".join(lines[:cut]).strip(),
        body="\n".join(lines[cut + 1:]).strip(),
    )


def load_template(path: str | pathlib.Path) -> PromptTemplate:
    """Template file: instruction text, a `----` line, then the input body with {placeholders}."""
    return _load_template_cached(str(path))


def template_for(stage: str) -> PromptTemplate:
    return load_template(PROMPTS / strategy_for(stage).aligned_task_template)


def assemble_prompt(bundle: PromptBundle) -> str:
    blocks: List[str] = []
    if bundle.instruction.strip():
        blocks.append(bundle.instruction.strip())
    for x, y in bundle.demonstrations:
        blocks.append(f"{x.strip()}\n{y.strip()}")
    if bundle.input.strip():
        blocks.append(bundle.input.strip())
    return "\n\n".join(blocks)


# ------------------------------
# Response cache
# ------------------------------

def cache_key(prompt: str, config: DecodingConfig, model: str) -> str:
    return content_hash(prompt, repr(float(config.temperature)), repr(float(config.top_p)), str(int(config.max_tokens)), model)


class ResponseStore:
    """Append-only JSONL response cache; later records for a key win."""

    def __init__(self, path: str | pathlib.Path | None = None):
        self.path = pathlib.Path(path) if path else None
        self.entries: Dict[str, str] = {}
        self.hits = 0
        self.misses = 0
        self.warnings: List[str] = []
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        for line_no, rec, err in iter_jsonl(self.path):
            if err or "key" not in rec or "response" not in rec:
                self.warnings.append(f"{self.path.name}:{line_no}: unreadable cache record skipped")
                continue
            self.entries[str(rec["key"])] = str(rec["response"])

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            if key in self.entries:
                self.hits += 1
                return self.entries[key]
            self.misses += 1
            return None

    def put(self, prompt: str, response: str, config: DecodingConfig, model: str) -> str:
        key = cache_key(prompt, config, model)
        record = {
            "key": key,
            "model": model,
            "config": config.as_dict(),
            "prompt": prompt,
            "response": response,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        with self._lock:
            self.entries[key] = response
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(jsonl_line(record))
        return key

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / float(total) if total else 0.0


# ------------------------------
# Backends
# ------------------------------

class Backend(Protocol):
    def complete(self, prompt: str, config: DecodingConfig, model: str) -> str: ...


class HttpBackend:
    """Chat-completions style endpoint; the prompt goes out as a single user message."""

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "TASQL_API_KEY",
        timeout: float = 120.0,
        attempts: int = 3,
        backoff_s: float = 1.0,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not base_url:
            raise ConfigError("backend_url is required for live/record mode")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.attempts = max(1, int(attempts))
        self.backoff_s = backoff_s
        self.session = session or requests.Session()
        self.sleep = sleep

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, prompt: str, config: DecodingConfig, model: str) -> str:
        payload = {
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
            **config.as_dict(),
        }
        last_error: Optional[Exception] = None
        for attempt in range(self.attempts):
            try:
                resp = self.session.post(self.url, json=payload, headers=self._headers(), timeout=self.timeout)
                resp.raise_for_status()
                data = resp.json()
                return data["choices"][0]["message"]["content"] or ""
            except (requests.RequestException, ValueError, KeyError, IndexError, TypeError) as e:
                last_error = e
                if attempt < self.attempts - 1:
                    self.sleep(self.backoff_s * (2 ** attempt))
        raise BackendError(f"completion failed after {self.attempts} attempts: {last_error}")


# ------------------------------
# Gateway
# ------------------------------

class LLMGateway:
    """
    live   - always call the backend, append every response to the cache
    record - serve cache hits, call the backend (and append) on a miss
    replay - cache only; a miss raises ReplayMissError and no network is touched
    """

    def __init__(
        self,
        mode: str = "replay",
        store: Optional[ResponseStore] = None,
        backend: Optional[Backend] = None,
        model_id: str = "",
        decoding: DecodingConfig = DecodingConfig(),
    ):
        if mode not in MODES:
            raise ConfigError(f"gateway mode must be one of {MODES}, got '{mode}'")
        if mode != "replay" and backend is None:
            raise ConfigError(f"{mode} mode needs a backend")
        self.mode = mode
        self.store = store if store is not None else ResponseStore()
        self.backend = backend
        self.model_id = model_id
        self.decoding = decoding
        self.backend_calls = 0
        self._inflight: Dict[str, Future] = {}
        self._inflight_lock = threading.Lock()

    def complete(self, prompt: str, config: Optional[DecodingConfig] = None) -> str:
        cfg = config or self.decoding
        key = cache_key(prompt, cfg, self.model_id)
        if self.mode in ("replay", "record"):
            cached = self.store.get(key)
            if cached is not None:
                return cached
            if self.mode == "replay":
                raise ReplayMissError(key)

        with self._inflight_lock:
            # the owner stores before it leaves the in-flight map
            if self.mode == "record" and key in self.store:
                return self.store.get(key)
            pending = self._inflight.get(key)
            owner = pending is None
            if owner:
                pending = Future()
                self._inflight[key] = pending
                self.backend_calls += 1
        if not owner:
            return pending.result()

        try:
            text = self.backend.complete(prompt, cfg, self.model_id)
            self.store.put(prompt, text, cfg, self.model_id)
            pending.set_result(text)
            return text
        except BaseException as e:
            pending.set_exception(e)
            raise
        finally:
            with self._inflight_lock:
                self._inflight.pop(key, None)

    def stats(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "model": self.model_id,
            "cache_entries": len(self.store),
            "hits": self.store.hits,
            "misses": self.store.misses,
            "hit_rate": round(self.store.hit_rate(), 4),
            "backend_calls": self.backend_calls,
        }


def record_responses(
    path: str | pathlib.Path,
    pairs: Sequence[Tuple[str, str]],
    model: str = "",
    config: DecodingConfig = DecodingConfig(),
) -> ResponseStore:
    """Write (prompt, response) pairs into a cache file; used to author replay fixtures."""
    store = ResponseStore(path)
    for prompt, response in pairs:
        store.put(prompt, response, config, model)
    return store
