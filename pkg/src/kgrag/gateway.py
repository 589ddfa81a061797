"""Uniform access to chat-completion and embedding endpoints.

Two transports implement the same wire contract: `HttpProvider` speaks the
OpenAI-style JSON protocol (with server-sent-event streaming), and
`ScriptedProvider` replays recorded fixtures so the whole engine can run
hermetically in tests. Every prompt passes a token-budget check before it
reaches a transport.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import requests

from .errors import (
    BudgetExceeded,
    DimensionMismatch,
    FixtureMiss,
    MalformedResponse,
    TransportError,
)
from .tokens import count_tokens, first_word_token

logger = logging.getLogger(__name__)

Message = dict[str, str]  # {"role": "system"|"user"|"assistant", "content": str}

AFFIRMATIVE_PREFIXES = ("yes", "y", "true", "是")

_ROLES = {"system", "user", "assistant"}


@dataclass(frozen=True)
class ProviderConfig:
    """Connection settings for one chat/embedding endpoint."""

    endpoint_url: str
    model_name: str
    max_context_tokens: int = 32768
    request_timeout: float = 60.0
    max_retries: int = 2
    extra_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_context_tokens < 1024:
            raise ValueError("max_context_tokens must be >= 1024")
        if not 0 <= self.max_retries <= 10:
            raise ValueError("max_retries must be in [0, 10]")


@dataclass
class ChatRequest:
    messages: list[Message]
    temperature: float = 0.0
    max_output_tokens: int = 1024
    stream: bool = False

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].get("role") not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        for m in self.messages:
            if m.get("role") not in _ROLES:
                raise ValueError(f"unknown role {m.get('role')!r}")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must be in [0, 1]")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    def prompt_tokens(self) -> int:
        return sum(count_tokens(m["content"]) for m in self.messages)


@dataclass(frozen=True)
class JudgeVerdict:
    verdict: str  # "yes" | "no"
    raw_text: str


def parse_verdict(raw_text: str, extra_affirmatives: Sequence[str] = ()) -> JudgeVerdict:
    """Map a completion to yes/no.

    Rule: lowercase, trim, take the first word token; affirmative iff it is
    one of AFFIRMATIVE_PREFIXES (plus any caller extensions). Anything
    unrecognized is "no" - the conservative default.
    """
    token = first_word_token(raw_text.strip().lower())
    allowed = set(AFFIRMATIVE_PREFIXES) | {a.lower() for a in extra_affirmatives}
    return JudgeVerdict("yes" if token in allowed else "no", raw_text)


def request_digest(messages: Sequence[Message]) -> str:
    """Fixture digest: sha256 over the canonical JSON of the messages.

    Canonical form is a compact JSON array of {content, role} objects with
    sorted keys and raw UTF-8. Temperature and limits deliberately do not
    participate, so a fixture answers a conversation regardless of sampling
    settings.
    """
    canon = json.dumps(
        [{"content": m["content"], "role": m["role"]} for m in messages],
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def embed_digest(text: str) -> str:
    """Fixture digest for embedding requests: sha256 of the raw text."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def seeded_hash_vector(text: str, dim: int) -> np.ndarray:
    """Deterministic unit vector derived from the text alone.

    Construction (documented so tests can recompute it independently): the
    sha256 of the text seeds a counter-based generator; block i is
    sha256(seed || uint64-be(i)), each 8-byte slice becomes a uniform in
    (0, 1), consecutive uniform pairs go through Box-Muller to produce
    gaussians, and the first `dim` gaussians are L2-normalized. No platform
    or library state participates, so the result is bit-stable everywhere.
    """
    seed = hashlib.sha256(text.encode("utf-8")).digest()
    gaussians: list[float] = []
    counter = 0
    while len(gaussians) < dim:
        block = hashlib.sha256(seed + struct.pack(">Q", counter)).digest()
        counter += 1
        uniforms = []
        for i in range(0, 32, 8):
            raw = int.from_bytes(block[i : i + 8], "big")
            # 53-bit mantissa; shift keeps the value strictly inside (0, 1)
            uniforms.append(((raw >> 11) + 1) / (1 << 53))
        for u1, u2 in ((uniforms[0], uniforms[1]), (uniforms[2], uniforms[3])):
            r = math.sqrt(-2.0 * math.log(u1))
            gaussians.append(r * math.cos(2.0 * math.pi * u2))
            gaussians.append(r * math.sin(2.0 * math.pi * u2))
    vec = np.array(gaussians[:dim], dtype=np.float64)
    vec /= np.linalg.norm(vec)
    return vec.astype(np.float32)


@dataclass
class CallRecord:
    seq: int
    kind: str  # "chat" | "embed"
    purpose: str  # "generate", "judge", "ner", "decompose", ...
    stage: str | None
    prompt_tokens: int
    completion_tokens: int
    messages: list[Message] | None = None


class CallLog:
    """Thread-safe record of every provider call, for tests and traces."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[CallRecord] = []

    def record(self, record: CallRecord) -> None:
        with self._lock:
            record.seq = len(self._entries)
            self._entries.append(record)

    def entries(self) -> list[CallRecord]:
        with self._lock:
            return list(self._entries)

    def mark(self) -> int:
        with self._lock:
            return len(self._entries)

    def since(self, mark: int) -> list[CallRecord]:
        with self._lock:
            return list(self._entries[mark:])

    def count(self, kind: str | None = None, purpose: str | None = None) -> int:
        return sum(
            1
            for e in self.entries()
            if (kind is None or e.kind == kind) and (purpose is None or e.purpose == purpose)
        )


class ScriptedProvider:
    """Deterministic fixture-replay transport.

    Chat requests are answered by digest lookup in the fixture table; a miss
    raises FixtureMiss so tests stay hermetic. Embedding requests fall back
    to the seeded-hash construction when no fixture vector exists. In-process
    tests may also register `rules`: (predicate, completion) pairs consulted
    after the digest table. The provider is immutable once constructed.
    """

    def __init__(
        self,
        fixtures: dict[str, dict] | None = None,
        rules: Sequence[tuple[Callable[[list[Message]], bool], Callable[[list[Message]], str] | str]] = (),
        embeddings: dict[str, list[float]] | None = None,
        dimension: int = 64,
    ):
        self._fixtures = dict(fixtures or {})
        self._rules = list(rules)
        self._embeddings = {k: np.asarray(v, dtype=np.float32) for k, v in (embeddings or {}).items()}
        self.dimension = dimension

    @classmethod
    def from_file(cls, path: str | Path, dimension: int = 64) -> "ScriptedProvider":
        """Load a JSONL fixture file.

        Each line is {"digest": hex, "completion": str, "fragments"?: [str]}
        for chat fixtures or {"digest": hex, "embedding": [float]} for
        embedding fixtures.
        """
        fixtures: dict[str, dict] = {}
        embeddings: dict[str, list[float]] = {}
        p = Path(path)
        if p.exists() and p.stat().st_size > 0:
            for line in p.read_text(encoding="utf-8").splitlines():
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                if "embedding" in entry:
                    embeddings[entry["digest"]] = entry["embedding"]
                else:
                    fixtures[entry["digest"]] = entry
        return cls(fixtures=fixtures, embeddings=embeddings, dimension=dimension)

    def _lookup(self, messages: list[Message]) -> dict:
        digest = request_digest(messages)
        entry = self._fixtures.get(digest)
        if entry is not None:
            return entry
        for predicate, completion in self._rules:
            if predicate(messages):
                text = completion(messages) if callable(completion) else completion
                return {"completion": text}
        raise FixtureMiss(f"no fixture for digest {digest[:12]}... "
                          f"(last user message: {messages[-1]['content'][:80]!r})")

    def complete(self, request: ChatRequest, config: ProviderConfig) -> str:
        return self._lookup(request.messages)["completion"]

    def complete_stream(self, request: ChatRequest, config: ProviderConfig) -> Iterator[str]:
        entry = self._lookup(request.messages)
        fragments = entry.get("fragments")
        if fragments:
            yield from fragments
        else:
            yield entry["completion"]

    def embed(self, texts: Sequence[str], config: ProviderConfig) -> list[np.ndarray]:
        out = []
        for text in texts:
            fixture = self._embeddings.get(embed_digest(text))
            out.append(fixture if fixture is not None else seeded_hash_vector(text, self.dimension))
        return out


class HttpProvider:
    """OpenAI-style JSON wire protocol over HTTP."""

    def __init__(self, session: requests.Session | None = None):
        self._session = session or requests.Session()

    def _post(self, url: str, payload: dict, config: ProviderConfig, stream: bool = False):
        last_error: Exception | None = None
        for attempt in range(config.max_retries + 1):
            try:
                resp = self._session.post(
                    url, json=payload, timeout=config.request_timeout, stream=stream
                )
                if resp.status_code >= 500:
                    raise TransportError(f"server error {resp.status_code}")
                if resp.status_code != 200:
                    raise MalformedResponse(f"unexpected status {resp.status_code}: {resp.text[:200]}")
                return resp
            except (requests.RequestException, TransportError) as exc:
                last_error = exc
                logger.warning("provider call failed (attempt %d/%d): %s",
                               attempt + 1, config.max_retries + 1, exc)
        raise TransportError(f"provider unreachable after {config.max_retries + 1} attempts: {last_error}")

    def _chat_payload(self, request: ChatRequest, config: ProviderConfig) -> dict:
        payload = {
            "model": config.model_name,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "stream": request.stream,
        }
        payload.update(config.extra_params)
        return payload

    def complete(self, request: ChatRequest, config: ProviderConfig) -> str:
        url = config.endpoint_url.rstrip("/") + "/chat/completions"
        resp = self._post(url, self._chat_payload(request, config), config)
        try:
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"bad chat completion body: {exc}") from exc

    def complete_stream(self, request: ChatRequest, config: ProviderConfig) -> Iterator[str]:
        url = config.endpoint_url.rstrip("/") + "/chat/completions"
        resp = self._post(url, self._chat_payload(request, config), config, stream=True)
        for raw_line in resp.iter_lines(decode_unicode=True):
            if not raw_line or not raw_line.startswith("data:"):
                continue
            body = raw_line[len("data:"):].strip()
            if body == "[DONE]":
                break
            try:
                chunk = json.loads(body)
                delta = chunk["choices"][0].get("delta", {})
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise MalformedResponse(f"bad stream chunk: {body[:120]!r}") from exc
            text = delta.get("content")
            if text:
                yield text

    def embed(self, texts: Sequence[str], config: ProviderConfig) -> list[np.ndarray]:
        url = config.endpoint_url.rstrip("/") + "/embeddings"
        resp = self._post(url, {"model": config.model_name, "input": list(texts)}, config)
        try:
            rows = resp.json()["data"]
            return [np.asarray(row["embedding"], dtype=np.float32) for row in rows]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"bad embeddings body: {exc}") from exc


def build_transport(config: ProviderConfig):
    """Pick a transport from the endpoint URL.

    ``scripted:<path>`` loads a fixture file (empty path means no fixtures,
    seeded-hash embeddings only); anything else is treated as an HTTP base
    URL.
    """
    if config.endpoint_url.startswith("scripted:"):
        path = config.endpoint_url[len("scripted:"):]
        dim = int(config.extra_params.get("dimension", 64))
        if path:
            return ScriptedProvider.from_file(path, dimension=dim)
        return ScriptedProvider(dimension=dim)
    return HttpProvider()


class LLMGateway:
    """Budget-enforcing front door for every LLM call in the engine.

    Thread-safe; concurrent in-flight requests are capped by a semaphore.
    A per-thread stage label lets the pipeline attribute calls to trace
    stages without threading the label through every helper.
    """

    def __init__(
        self,
        config: ProviderConfig,
        transport=None,
        embed_config: ProviderConfig | None = None,
        embed_transport=None,
        max_concurrency: int = 4,
        temperatures: dict[str, float] | None = None,
    ):
        self.config = config
        self.transport = transport if transport is not None else build_transport(config)
        self.embed_config = embed_config or config
        self.embed_transport = (
            embed_transport if embed_transport is not None
            else (self.transport if embed_config is None else build_transport(self.embed_config))
        )
        # per-purpose sampling overrides; unlisted purposes keep the request's
        # temperature (0.0 everywhere by default)
        self.temperatures = dict(temperatures or {})
        self.call_log = CallLog()
        self._semaphore = threading.Semaphore(max_concurrency)
        self._stage = threading.local()

    # -- stage attribution --------------------------------------------------

    def set_stage(self, stage: str | None) -> None:
        self._stage.name = stage

    def current_stage(self) -> str | None:
        return getattr(self._stage, "name", None)

    # -- operations ----------------------------------------------------------

    def chat(
        self,
        request: ChatRequest,
        *,
        purpose: str = "chat",
        sink: Callable[[str], None] | None = None,
    ) -> str:
        """Run a chat completion. Streams fragments to `sink` when requested.

        Raises BudgetExceeded if the prompt cannot fit the window; the caller
        is responsible for truncating.
        """
        if purpose in self.temperatures:
            request.temperature = self.temperatures[purpose]
        prompt_tokens = request.prompt_tokens()
        window = self.config.max_context_tokens - request.max_output_tokens
        if prompt_tokens > window:
            raise BudgetExceeded(
                f"prompt is {prompt_tokens} tokens but only {window} fit "
                f"(context {self.config.max_context_tokens}, reserved {request.max_output_tokens})"
            )
        with self._semaphore:
            # transport-boundary assertion: nothing over-budget is ever sent
            if request.prompt_tokens() > window:
                raise BudgetExceeded("budget invariant violated at transport boundary")
            if request.stream:
                parts: list[str] = []
                for fragment in self.transport.complete_stream(request, self.config):
                    parts.append(fragment)
                    if sink is not None:
                        sink(fragment)
                text = "".join(parts)
            else:
                text = self.transport.complete(request, self.config)
        self.call_log.record(
            CallRecord(
                seq=-1,
                kind="chat",
                purpose=purpose,
                stage=self.current_stage(),
                prompt_tokens=prompt_tokens,
                completion_tokens=count_tokens(text),
                messages=list(request.messages),
            )
        )
        return text

    def judge(
        self,
        prompt: str,
        *,
        extra_affirmatives: Sequence[str] = (),
        purpose: str = "judge",
        max_output_tokens: int = 64,
    ) -> JudgeVerdict:
        """One yes/no decision. Unparseable completions default to no."""
        if not prompt:
            raise ValueError("judge prompt must be non-empty")
        raw = self.chat(
            ChatRequest(
                messages=[{"role": "user", "content": prompt}],
                max_output_tokens=max_output_tokens,
            ),
            purpose=purpose,
        )
        return parse_verdict(raw, extra_affirmatives)

    def embed(self, texts: Sequence[str], *, purpose: str = "embed") -> list[np.ndarray]:
        """Embed texts; the result is always L2-normalized.

        Raises DimensionMismatch when the provider returns inconsistent
        dimensions.
        """
        if not texts:
            raise ValueError("texts must be non-empty")
        for t in texts:
            if not t:
                raise ValueError("each text must be non-empty")
        with self._semaphore:
            vectors = self.embed_transport.embed(texts, self.embed_config)
        dims = {v.shape[0] for v in vectors}
        if len(vectors) != len(texts) or len(dims) != 1:
            raise DimensionMismatch(f"expected {len(texts)} same-dimension vectors, got dims {sorted(dims)}")
        out = []
        for vec in vectors:
            v64 = vec.astype(np.float64)
            norm = np.linalg.norm(v64)
            if norm == 0:
                raise DimensionMismatch("provider returned a zero vector")
            out.append((v64 / norm).astype(np.float32))
        self.call_log.record(
            CallRecord(
                seq=-1,
                kind="embed",
                purpose=purpose,
                stage=self.current_stage(),
                prompt_tokens=sum(count_tokens(t) for t in texts),
                completion_tokens=0,
            )
        )
        return out
