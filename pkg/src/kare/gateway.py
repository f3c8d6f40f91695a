"""Uniform gateway to chat-completion and text-embedding backends.

Provides prompt-template rendering from versioned text assets, a
content-addressed response cache, bounded retries with exponential backoff,
an in-flight concurrency budget, and fully deterministic mock backends that
turn the whole pipeline into a pure function of its inputs and seeds.
"""

from __future__ import annotations

import hashlib
import json
import re
import string
import threading
import time
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .errors import BackendError, TemplateError

DEFAULT_MAX_OUTPUT_TOKENS = 4096


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str
    required: frozenset[str]

    @classmethod
    def from_text(cls, template_id: str, text: str) -> "PromptTemplate":
        names = {
            name
            for _, name, _, _ in string.Formatter().parse(text)
            if name is not None
        }
        if any(not name for name in names):
            raise TemplateError(f"template {template_id}: positional fields not allowed")
        return cls(template_id, text, frozenset(names))

    def render(self, values: dict[str, str]) -> str:
        missing = self.required - set(values)
        if missing:
            raise TemplateError(
                f"template {self.template_id}: unbound placeholders {sorted(missing)}"
            )
        rendered = self.text.format(**{k: str(v) for k, v in values.items()})
        if re.search(r"\{[A-Za-z_][A-Za-z0-9_]*\}", rendered):
            raise TemplateError(
                f"template {self.template_id}: unresolved placeholder in output"
            )
        return rendered


def load_template(template_id: str) -> PromptTemplate:
    """Load a template asset shipped with the package."""
    try:
        text = (
            resources.files("kare").joinpath(f"templates/{template_id}.txt").read_text("utf-8")
        )
    except FileNotFoundError as exc:
        raise TemplateError(f"no template asset named {template_id!r}") from exc
    return PromptTemplate.from_text(template_id, text)


# ---------------------------------------------------------------------------
# Requests and backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChatRequest:
    template_id: str
    values: dict[str, str] = field(default_factory=dict)
    max_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    determinism: float = 0.0  # temperature-equivalent knob; part of the cache key

    def cache_key(self, backend_id: str) -> str:
        payload = json.dumps(
            {
                "template": self.template_id,
                "values": {k: str(v) for k, v in sorted(self.values.items())},
                "max_tokens": self.max_tokens,
                "determinism": self.determinism,
                "backend": backend_id,
            },
            sort_keys=True,
            ensure_ascii=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ChatBackend(Protocol):
    backend_id: str

    def complete(self, request: ChatRequest, prompt: str) -> str: ...


class EmbeddingBackend(Protocol):
    backend_id: str
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class EchoChat:
    """Returns the rendered prompt; handy for fixture-free tests."""

    backend_id = "echo"

    def complete(self, request: ChatRequest, prompt: str) -> str:
        return prompt


class ScriptedChat:
    """Serves queued responses in order; raises when the script runs dry."""

    backend_id = "scripted"

    def __init__(self, responses: Iterable[str]):
        self._responses = list(responses)
        self.calls = 0

    def complete(self, request: ChatRequest, prompt: str) -> str:
        if self.calls >= len(self._responses):
            raise BackendError("scripted backend exhausted")
        text = self._responses[self.calls]
        self.calls += 1
        return text


class FlakyChat:
    """Fails the first ``failures`` calls, then delegates; exercises retry."""

    backend_id = "flaky"

    def __init__(self, inner: ChatBackend, failures: int):
        self._inner = inner
        self._remaining = failures
        self.attempts = 0

    def complete(self, request: ChatRequest, prompt: str) -> str:
        self.attempts += 1
        if self._remaining > 0:
            self._remaining -= 1
            raise BackendError("transient failure", status=503)
        return self._inner.complete(request, prompt)


class RecordingChat:
    """Wraps a backend and records (template_id, prompt) per call."""

    def __init__(self, inner: ChatBackend):
        self._inner = inner
        self.backend_id = inner.backend_id
        self.transcript: list[tuple[str, str]] = []

    def complete(self, request: ChatRequest, prompt: str) -> str:
        self.transcript.append((request.template_id, prompt))
        return self._inner.complete(request, prompt)

    def calls_for(self, template_id: str) -> int:
        return sum(1 for tid, _ in self.transcript if tid == template_id)


def _stable_digest(*parts: str) -> int:
    joined = "\x1f".join(parts)
    return int.from_bytes(hashlib.sha256(joined.encode("utf-8")).digest()[:8], "big")


class DeterministicChat:
    """Mock chat model that synthesizes plausible, fully deterministic output
    for each pipeline prompt kind, derived from a hash of the request."""

    backend_id = "mock"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def complete(self, request: ChatRequest, prompt: str) -> str:
        handler = getattr(self, "_" + request.template_id, None)
        if handler is None:
            return f"mock response {_stable_digest(str(self.seed), prompt) % 10_000}"
        return handler(request)

    @staticmethod
    def _concept_list(raw: str) -> list[str]:
        return [c.strip() for c in raw.split(";") if c.strip()]

    def _triples_from_text(self, request: ChatRequest) -> str:
        concepts = self._concept_list(request.values.get("concepts", ""))
        text = request.values.get("text", "")
        mentioned = [c for c in concepts if c.lower() in text.lower()] or concepts
        h = _stable_digest(str(self.seed), "bc", text, *mentioned)
        items = []
        for a, b in zip(mentioned, mentioned[1:]):
            items.append(f"[{a}, frequently co-occurs with, {b}]")
        for i, c in enumerate(mentioned):
            items.append(f"[{c}, discussed in, report series {((h + i) % 7) + 1}]")
        return "[" + ", ".join(items[:10]) + "]"

    def _triples_from_concepts(self, request: ChatRequest) -> str:
        concepts = self._concept_list(request.values.get("concepts", ""))
        h = _stable_digest(str(self.seed), "llm", *concepts)
        items = []
        for i, c in enumerate(concepts):
            mediator = f"pathway {((h + i) % 9) + 1}"
            marker = f"marker {((h + 3 * i) % 9) + 1}"
            items.append(f"[{c}, activates, {mediator}]")
            items.append(f"[{mediator}, raises, {marker}]")
            if i + 1 < len(concepts):
                items.append(f"[{marker}, predisposes to, {concepts[i + 1]}]")
        return "[" + ", ".join(items) + "]"

    def _summary_general(self, request: ChatRequest) -> str:
        triples = request.values.get("triples", "")
        terms = sorted({w.strip() for w in re.split(r"[;()\n]", triples) if w.strip()})
        return "This knowledge group links " + ", ".join(terms[:12]) + "."

    def _summary_theme(self, request: ChatRequest) -> str:
        theme = request.values.get("theme", "the task")
        base = self._summary_general(request)
        return f"Regarding {theme}: {base}"

    def _summary_combine(self, request: ChatRequest) -> str:
        parts = request.values.get("summaries", "")
        merged = " ".join(line.strip() for line in parts.splitlines() if line.strip())
        return "Combined view: " + merged

    def _chain_gen(self, request: ChatRequest) -> str:
        label = request.values.get("label", "0")
        h = _stable_digest(str(self.seed), "chain", request.values.get("context", ""),
                           label, str(request.determinism))
        confidence = (h % 5) + 1
        return (
            "Step 1: The recorded conditions and retrieved knowledge were reviewed.\n"
            "Step 2: Risk indicators in the context were weighed against the history.\n"
            f"Step 3: The evidence points to the outcome {label}.\n"
            f"Confidence: {confidence}"
        )


class MockEmbedding:
    """Unit vectors drawn from a hash-seeded Gaussian; identical texts embed
    identically and distinct texts are near-orthogonal in expectation."""

    backend_id = "mock-embed"

    def __init__(self, dimension: int = 64, seed: int = 0):
        self.dimension = dimension
        self.seed = seed

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dimension), dtype=np.float32)
        for i, text in enumerate(texts):
            rng = np.random.default_rng(_stable_digest(str(self.seed), text))
            vec = rng.standard_normal(self.dimension)
            norm = float(np.linalg.norm(vec))
            out[i] = (vec / norm).astype(np.float32)
        return out


class HttpChat:
    """Minimal generic HTTP chat backend: POST {base}/chat with a JSON body."""

    def __init__(self, base_url: str, api_key: str = "", timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.backend_id = f"http:{self.base_url}"

    def complete(self, request: ChatRequest, prompt: str) -> str:
        body = json.dumps(
            {"prompt": prompt, "max_tokens": request.max_tokens,
             "temperature": request.determinism}
        ).encode("utf-8")
        req = urllib.request.Request(
            self.base_url + "/chat", data=body, method="POST",
            headers=self._headers(),
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except Exception as exc:
            raise BackendError(f"chat backend call failed: {exc}") from exc
        if "text" not in payload:
            raise BackendError("chat backend response missing 'text'")
        return str(payload["text"])

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers


class HttpEmbedding:
    """Minimal generic HTTP embedding backend: POST {base}/embed."""

    def __init__(self, base_url: str, api_key: str = "", dimension: int = 0,
                 timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.dimension = dimension
        self.timeout = timeout
        self.backend_id = f"http-embed:{self.base_url}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        body = json.dumps({"texts": list(texts)}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(
            self.base_url + "/embed", data=body, method="POST", headers=headers
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except Exception as exc:
            raise BackendError(f"embedding backend call failed: {exc}") from exc
        matrix = np.asarray(payload.get("vectors", []), dtype=np.float32)
        if matrix.shape[0] != len(texts):
            raise BackendError("embedding backend returned wrong row count")
        return matrix


# ---------------------------------------------------------------------------
# Response cache
# ---------------------------------------------------------------------------


class ResponseCache:
    """Thread-safe response cache, optionally persisted as content-addressed
    files so expensive real-backend builds can resume."""

    def __init__(self, directory: str | Path | None = None):
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        self._dir = Path(directory) if directory is not None else None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> str | None:
        with self._lock:
            if key in self._mem:
                return self._mem[key]
        if self._dir is not None:
            path = self._dir / key
            if path.exists():
                text = path.read_text(encoding="utf-8")
                with self._lock:
                    self._mem[key] = text
                return text
        return None

    def put(self, key: str, value: str) -> None:
        with self._lock:
            self._mem[key] = value
        if self._dir is not None:
            (self._dir / key).write_text(value, encoding="utf-8")


# ---------------------------------------------------------------------------
# Gateway facade
# ---------------------------------------------------------------------------


@dataclass
class ChatResponse:
    text: str
    backend_id: str
    latency: float
    cached: bool


class Gateway:
    """Thread-safe facade over one chat backend and one embedding backend."""

    def __init__(
        self,
        chat: ChatBackend,
        embedding: EmbeddingBackend,
        cache: ResponseCache | None = None,
        max_in_flight: int = 4,
        max_attempts: int = 3,
        backoff_base: float = 0.1,
    ):
        self.chat_backend = chat
        self.embedding_backend = embedding
        self.cache = cache if cache is not None else ResponseCache()
        self._slots = threading.Semaphore(max_in_flight)
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._templates: dict[str, PromptTemplate] = {}
        self._embed_cache: dict[str, np.ndarray] = {}
        self._embed_lock = threading.Lock()

    def template(self, template_id: str) -> PromptTemplate:
        if template_id not in self._templates:
            self._templates[template_id] = load_template(template_id)
        return self._templates[template_id]

    def register_template(self, template: PromptTemplate) -> None:
        self._templates[template.template_id] = template

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt = self.template(request.template_id).render(request.values)
        key = request.cache_key(self.chat_backend.backend_id)
        cached = self.cache.get(key)
        if cached is not None:
            return ChatResponse(cached, self.chat_backend.backend_id, 0.0, cached=True)
        started = time.perf_counter()
        text = self._call_with_retry(
            lambda: self.chat_backend.complete(request, prompt)
        )
        self.cache.put(key, text)
        return ChatResponse(
            text, self.chat_backend.backend_id, time.perf_counter() - started, cached=False
        )

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            raise BackendError("embed() requires at least one text")
        order = list(texts)
        missing = []
        with self._embed_lock:
            for text in order:
                if text not in self._embed_cache and text not in missing:
                    missing.append(text)
        if missing:
            matrix = self._call_with_retry(
                lambda: self.embedding_backend.embed(missing)
            )
            if matrix.shape[0] != len(missing):
                raise BackendError("embedding backend returned wrong row count")
            with self._embed_lock:
                for text, row in zip(missing, matrix):
                    self._embed_cache[text] = np.asarray(row, dtype=np.float32)
        with self._embed_lock:
            return np.stack([self._embed_cache[t] for t in order])

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]

    def _call_with_retry(self, call: Callable):
        last: BackendError | None = None
        for attempt in range(self.max_attempts):
            with self._slots:
                try:
                    return call()
                except BackendError as exc:
                    last = exc
                    if attempt + 1 < self.max_attempts and self.backoff_base > 0:
                        time.sleep(self.backoff_base * (2**attempt))
        raise BackendError(
            f"backend failed after {self.max_attempts} attempts: {last}",
            status=getattr(last, "status", None),
        )


# ---------------------------------------------------------------------------
# Bracketed triple parsing
# ---------------------------------------------------------------------------

_ITEM = re.compile(r"\[([^\[\]]*)\]")


def parse_bracketed_triples(text: str) -> list[tuple[str, str, str]]:
    """Extract well-formed ``[a, b, c]`` items from a bracketed list, dropping
    malformed items individually; degrades to an empty list."""
    triples = []
    for match in _ITEM.finditer(text):
        parts = [p.strip() for p in match.group(1).split(",")]
        if len(parts) != 3 or any(not p for p in parts):
            continue
        triples.append((parts[0], parts[1], parts[2]))
    return triples
