"""In-context-learning caption rewriting.

A prompt is three parts: a fixed task sentence, three demonstration pairs
drawn from one meta-pair strategy (``source => target``), and the caption to
rewrite followed by the separator. Completions come from any object that
satisfies :class:`CompletionClient`; raw completions are cached in an
append-only log keyed by a 64-bit hash of the request.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import BackendError, ConfigError, EmptyRewrite, UnknownStrategy
from .hashing import canonical_json, hash64
from .textaug import AugmentedRecord

log = logging.getLogger(__name__)

TASK_SENTENCE = "Rewrite the following image descriptions, keeping the key objects and meaning."
SEPARATOR = "=>"
STRATEGIES = ("chatgpt", "bard", "mscoco", "human")
N_EXAMPLES = 3
DEFAULT_TEMPERATURE = 0.9
DEFAULT_MAX_TOKENS = 64
STOP = "\n"


@dataclass(frozen=True)
class MetaPair:
    source: str
    target: str
    strategy: str

    def __post_init__(self):
        if not self.source.strip() or not self.target.strip():
            raise ValueError("meta pair source and target must be non-empty")

    def render(self) -> str:
        return f"{self.source} {SEPARATOR} {self.target}"


@dataclass(frozen=True)
class PromptContext:
    task_sentence: str
    examples: tuple[MetaPair, ...]
    query: str

    def __post_init__(self):
        if len(self.examples) != N_EXAMPLES:
            raise ValueError(f"expected {N_EXAMPLES} examples, got {len(self.examples)}")
        if len(set(self.examples)) != N_EXAMPLES:
            raise ValueError("examples must be distinct")
        if len({ex.strategy for ex in self.examples}) != 1:
            raise ValueError("examples must come from a single strategy")
        if not self.query.strip():
            raise ValueError("query must be non-empty")

    def render(self) -> str:
        lines = [self.task_sentence, *(ex.render() for ex in self.examples), f"{self.query} {SEPARATOR}"]
        return "\n".join(lines)


@dataclass(frozen=True)
class MetaPairRegistry:
    """The bundled demonstration data.

    ``pairs`` holds the fixed (source, target) pairs for chatgpt, bard and
    human. ``mscoco`` holds caption groups, one per image; an mscoco pair is
    two distinct captions of the same image, drawn at prompt time.
    """

    pairs: dict[str, tuple[MetaPair, ...]]
    mscoco: tuple[tuple[str, ...], ...]

    def strategies(self) -> tuple[str, ...]:
        return tuple(self.pairs) + ("mscoco",)

    def size(self, strategy: str) -> int:
        if strategy == "mscoco":
            return len(self.mscoco)
        if strategy not in self.pairs:
            raise UnknownStrategy(strategy)
        return len(self.pairs[strategy])


@lru_cache(maxsize=1)
def load_registry() -> MetaPairRegistry:
    raw = json.loads(resources.files("laclip_kit").joinpath("data/meta_pairs.json").read_text("utf-8"))
    pairs = {
        name: tuple(MetaPair(p["source"], p["target"], name) for p in raw[name])
        for name in ("chatgpt", "bard", "human")
    }
    return MetaPairRegistry(pairs=pairs, mscoco=tuple(tuple(g) for g in raw["mscoco"]))


def _normalize_line(text: str) -> str:
    return " ".join(text.split())


def build_prompt(
    strategy: str,
    query: str,
    rng: np.random.Generator,
    registry: MetaPairRegistry | None = None,
) -> tuple[PromptContext, str]:
    """Sample three distinct demonstrations from ``strategy`` and render the prompt.

    The rendered prompt is always five lines; the last is ``"{query} =>"``
    with nothing after the separator.
    """
    registry = registry or load_registry()
    query = _normalize_line(query)
    if not query:
        raise ValueError("query must be non-empty")
    if strategy == "mscoco":
        images = rng.choice(len(registry.mscoco), size=N_EXAMPLES, replace=False)
        examples = []
        for i in images:
            group = registry.mscoco[i]
            a, b = rng.choice(len(group), size=2, replace=False)
            examples.append(MetaPair(group[a], group[b], "mscoco"))
    else:
        if strategy not in registry.pairs:
            raise UnknownStrategy(strategy)
        pool = registry.pairs[strategy]
        examples = [pool[i] for i in rng.choice(len(pool), size=N_EXAMPLES, replace=False)]
    ctx = PromptContext(TASK_SENTENCE, tuple(examples), query)
    return ctx, ctx.render()


def postprocess_completion(raw: str) -> str:
    """Cut a raw completion down to a single-line rewrite.

    Leading whitespace is dropped, the text is cut at the first newline, and
    a stray separator at either end is removed.
    """
    text = raw.lstrip().split("\n", 1)[0].strip()
    if text.startswith(SEPARATOR):
        text = text[len(SEPARATOR):]
    if text.endswith(SEPARATOR):
        text = text[: -len(SEPARATOR)]
    text = text.strip()
    if not text:
        raise EmptyRewrite("completion is empty after post-processing")
    return text


# ---------------------------------------------------------------------------
# completion backends


class CompletionClient(Protocol):
    backend_id: str

    def complete(self, prompt: str, temperature: float, max_tokens: int, stop: str) -> str: ...


class FixtureCompletion:
    """Deterministic in-process backend for tests and offline runs.

    Echoes the query with a marker and some trailing junk after a newline,
    so post-processing is exercised. Thread-safe call counter.
    """

    backend_id = "fixture"

    def __init__(self, template: str = " {query}, seen again\nnext caption =>"):
        self.template = template
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str, temperature: float, max_tokens: int, stop: str) -> str:
        with self._lock:
            self.calls += 1
        query = prompt.rsplit("\n", 1)[-1]
        query = query[: -len(SEPARATOR)].strip() if query.endswith(SEPARATOR) else query
        return self.template.format(query=query)


class HttpCompletion:
    """POSTs ``{prompt, temperature, max_tokens, stop}`` and reads ``{text}``.

    Endpoint and key come from ``COMPLETION_ENDPOINT`` / ``COMPLETION_API_KEY``
    unless given explicitly.
    """

    backend_id = "http"

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint or os.environ.get("COMPLETION_ENDPOINT")
        if not self.endpoint:
            raise ConfigError("no completion endpoint; set COMPLETION_ENDPOINT")
        self.api_key = api_key if api_key is not None else os.environ.get("COMPLETION_API_KEY")
        self.timeout = timeout

    def complete(self, prompt: str, temperature: float, max_tokens: int, stop: str) -> str:
        body = canonical_json(
            {"prompt": prompt, "temperature": temperature, "max_tokens": max_tokens, "stop": stop}
        ).encode()
        request_id = f"{hash64(body):016x}"
        headers = {"Content-Type": "application/json", "X-Request-Id": request_id}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))["text"]
        except (urllib.error.URLError, OSError, ValueError, KeyError) as e:
            raise BackendError(f"completion request failed: {e}", request_id) from e


# ---------------------------------------------------------------------------
# cache


def cache_key(strategy: str, prompt: str, temperature: float, seed: int) -> str:
    payload = canonical_json([strategy, prompt, repr(float(temperature)), int(seed)])
    return f"{hash64(payload):016x}"


@dataclass(frozen=True)
class RewriteCacheEntry:
    key: str
    completion: str
    backend_id: str
    created_at: str


class RewriteCache:
    """Append-only JSON-lines log with an in-memory index.

    ``path=None`` keeps the cache in memory only. A torn final line (crash
    mid-append) is skipped on load.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._index: dict[str, RewriteCacheEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open("r", encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    if not line.endswith("\n"):
                        log.warning("cache %s: skipping torn line %d", self.path, lineno)
                        continue
                    entry = RewriteCacheEntry(**json.loads(line))
                    self._index[entry.key] = entry

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def get(self, key: str) -> RewriteCacheEntry | None:
        return self._index.get(key)

    def put(self, key: str, completion: str, backend_id: str) -> RewriteCacheEntry:
        entry = RewriteCacheEntry(key, completion, backend_id, datetime.now(timezone.utc).isoformat())
        with self._lock:
            if key in self._index:
                return self._index[key]
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as f:
                    f.write(canonical_json(entry.__dict__) + "\n")
                    f.flush()
                    os.fsync(f.fileno())
            self._index[key] = entry
        return entry


# ---------------------------------------------------------------------------
# dataset-scale rewriting


@dataclass
class RewriteReport:
    cached: int = 0
    fetched: int = 0
    fallback: int = 0
    fallback_ids: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"cached": self.cached, "fetched": self.fetched, "fallback": self.fallback,
                "fallback_ids": list(self.fallback_ids)}


def item_seed(rng_seed: int, record_id: str, strategy: str, attempt: int) -> int:
    """Seed for one (record, strategy, attempt); independent of sharding and order."""
    return hash64(canonical_json([int(rng_seed), record_id, strategy, int(attempt)]))


@dataclass
class _Outcome:
    text: str
    backend_id: str
    cached: bool
    fallback: bool


def _rewrite_one(record, strategy, backend, cache, temperature, rng_seed, retries, backoff,
                 max_tokens, registry):
    query = record.captions[0]
    for attempt in range(retries + 1):
        seed = item_seed(rng_seed, record.id, strategy, attempt)
        _, prompt = build_prompt(strategy, query, np.random.default_rng(seed), registry)
        key = cache_key(strategy, prompt, temperature, seed)
        entry = cache.get(key)
        cached = entry is not None
        if entry is None:
            try:
                raw = backend.complete(prompt, temperature, max_tokens, STOP)
            except BackendError:
                if attempt == retries:
                    raise
                time.sleep(backoff * 2**attempt)
                continue
            entry = cache.put(key, raw, backend.backend_id)
        try:
            return _Outcome(postprocess_completion(entry.completion), entry.backend_id, cached, False)
        except EmptyRewrite:
            log.warning("record %s: empty %s rewrite, falling back to original", record.id, strategy)
            return _Outcome(query, "fallback", cached, True)
    raise AssertionError("unreachable")


def rewrite_dataset(
    records: list[AugmentedRecord],
    strategies: list[str],
    backend: CompletionClient,
    cache: RewriteCache | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    concurrency: int = 1,
    rng_seed: int = 0,
    retries: int = 3,
    backoff: float = 0.5,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> tuple[list[AugmentedRecord], RewriteReport]:
    """Produce one rewrite per (record, strategy).

    Output records keep the input order; ``captions[0]`` is the input's
    original caption and ``captions[1:]`` follow ``strategies``. Empty
    completions fall back to the original caption. A backend that keeps
    failing after ``retries`` retries raises :class:`BackendError`; every
    completion already received stays in the cache.
    """
    if not strategies:
        raise ConfigError("at least one strategy is required")
    if concurrency < 1:
        raise ConfigError("concurrency must be positive")
    registry = load_registry()
    for s in strategies:
        registry.size(s)
    cache = cache if cache is not None else RewriteCache()
    items = [(r, s) for r in records for s in strategies]

    def run(item):
        return _rewrite_one(item[0], item[1], backend, cache, temperature, rng_seed, retries,
                            backoff, max_tokens, registry)

    if concurrency == 1:
        outcomes = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            futures = [pool.submit(run, it) for it in items]
            done, pending = wait(futures, return_when=FIRST_EXCEPTION)
            for f in pending:
                f.cancel()
            for f in futures:
                if f in done and f.exception() is not None:
                    raise f.exception()
            outcomes = [f.result() for f in futures]

    report = RewriteReport()
    out = []
    n = len(strategies)
    for i, record in enumerate(records):
        chunk = outcomes[i * n:(i + 1) * n]
        for o in chunk:
            if o.cached:
                report.cached += 1
            else:
                report.fetched += 1
            if o.fallback:
                report.fallback += 1
                report.fallback_ids.append(record.id)
        out.append(AugmentedRecord(
            record.id, record.image_ref, [record.captions[0]] + [o.text for o in chunk],
            [(s, o.backend_id) for s, o in zip(strategies, chunk)],
        ))
    return out, report
