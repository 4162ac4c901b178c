"""Chat and search provider clients, including deterministic mocks.

Two small interfaces (chat streaming, ranked search) with one adapter per
vendor wire format. The mock providers are the contract the test suite
runs against:

* ``mock-echo`` replies with ``"echo: " + prompt``, split into fixed-size
  chunks. Prompts may embed harness directives: ``[[chunk_chars=K]]``
  controls the split, ``[[fail_after=K]]`` aborts the stream after K
  chunks, ``[[refuse]]`` raises ContentError. Directives are stripped
  from the echoed text, so identical inputs always stream identically.
* ``mock-corpus`` ranks a seeded document file by per-document score.
  A query matches a document when every query token occurs in its title
  or body (case-insensitive).

Real adapters speak each vendor's public HTTP API and are configured, not
architectural: anything OpenAI/Gemini/Claude-shaped works via base URLs.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import httpx
from pydantic import BaseModel, ConfigDict, Field

from .model import StudyKitError

CONNECT_TIMEOUT_S = 10.0
STREAM_TIMEOUT_S = 120.0


class AuthError(StudyKitError):
    pass


class ProviderUnavailable(StudyKitError):
    """Transient upstream failure; safe to retry once."""


class ContentError(StudyKitError):
    """Provider refused to answer the prompt."""


class EmptyResults(StudyKitError):
    """Search succeeded but matched nothing; a signal, not a failure."""


class LlmSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    provider: str = "mock-echo"  # openai-compatible | gemini-compatible | claude-compatible | mock-echo
    model: str = "mock"
    api_key_ref: str = ""
    params: dict = Field(default_factory=lambda: {"temperature": 0.7, "max_tokens": 1024})
    base_url: str = ""


class SearchSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    provider: str = "mock-corpus"  # generic-search-api | mock-corpus
    api_key_ref: str = ""
    results_per_query: int = Field(default=10, ge=1, le=50)
    base_url: str = ""
    corpus_path: str = ""


class ProviderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    llm: LlmSettings = Field(default_factory=LlmSettings)
    search: SearchSettings = Field(default_factory=SearchSettings)


@dataclass(frozen=True)
class StreamChunk:
    chunk_index: int
    text: str
    is_final: bool


@dataclass(frozen=True)
class SearchResult:
    rank: int
    title: str
    url: str
    snippet: str


@dataclass(frozen=True)
class ResultPage:
    query_text: str
    results: list[SearchResult]


# ---------------------------------------------------------------------------
# mock-echo chat

_DIRECTIVE_RE = re.compile(r"\[\[(chunk_chars|fail_after)=(\d+)\]\]|\[\[refuse\]\]")
DEFAULT_CHUNK_CHARS = 4
ECHO_PREFIX = "echo: "


def _parse_directives(prompt: str) -> tuple[str, dict]:
    directives: dict = {}
    def _collect(match: re.Match) -> str:
        if match.group(0) == "[[refuse]]":
            directives["refuse"] = True
        else:
            directives[match.group(1)] = int(match.group(2))
        return ""
    cleaned = _DIRECTIVE_RE.sub(_collect, prompt)
    return cleaned, directives


def mock_echo_stream(history: list[dict]) -> Iterator[StreamChunk]:
    prompt = history[-1]["text"]
    cleaned, directives = _parse_directives(prompt)
    if directives.get("refuse"):
        raise ContentError("mock provider refused the prompt")
    full = ECHO_PREFIX + cleaned
    size = max(1, directives.get("chunk_chars", DEFAULT_CHUNK_CHARS))
    pieces = [full[i : i + size] for i in range(0, len(full), size)] or [""]
    fail_after = directives.get("fail_after")
    for index, piece in enumerate(pieces):
        if fail_after is not None and index >= fail_after:
            raise ProviderUnavailable("mock connection dropped mid-stream")
        yield StreamChunk(chunk_index=index, text=piece, is_final=index == len(pieces) - 1)


# ---------------------------------------------------------------------------
# mock-corpus search


@dataclass(frozen=True)
class CorpusDoc:
    doc_id: str
    title: str
    url: str
    body: str
    score: float


def load_corpus(path: Optional[str] = None) -> list[CorpusDoc]:
    """Read the seeded corpus: one tab-separated record per line
    (id, title, url, body, score)."""
    if path:
        raw = Path(path).read_text(encoding="utf-8")
    else:
        raw = resources.files("studykit.data").joinpath("mock_corpus.tsv").read_text(encoding="utf-8")
    docs = []
    for line in raw.splitlines():
        line = line.strip("\r")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise StudyKitError(f"bad corpus record: {line!r}")
        doc_id, title, url, body, score = parts
        docs.append(CorpusDoc(doc_id=doc_id, title=title, url=url, body=body, score=float(score)))
    return docs


def mock_corpus_search(query: str, count: int, corpus: list[CorpusDoc]) -> list[SearchResult]:
    tokens = [t for t in query.lower().split() if t]
    matches = []
    for doc in corpus:
        haystack = f"{doc.title} {doc.body}".lower()
        if all(token in haystack for token in tokens):
            matches.append(doc)
    matches.sort(key=lambda d: (-d.score, d.doc_id))
    return [
        SearchResult(rank=i + 1, title=d.title, url=d.url, snippet=d.body[:200])
        for i, d in enumerate(matches[:count])
    ]


# ---------------------------------------------------------------------------
# real chat adapters (OpenAI / Gemini / Claude wire formats)


def _sse_data_lines(response: httpx.Response) -> Iterator[str]:
    for line in response.iter_lines():
        if line.startswith("data:"):
            data = line[len("data:"):].strip()
            if data and data != "[DONE]":
                yield data


def _openai_stream(settings: LlmSettings, api_key: str, history: list[dict]) -> Iterator[str]:
    url = (settings.base_url or "https://api.openai.com/v1").rstrip("/") + "/chat/completions"
    body = {
        "model": settings.model,
        "messages": [{"role": m["role"], "content": m["text"]} for m in history],
        "stream": True,
        **{k: v for k, v in settings.params.items() if k in ("temperature", "max_tokens")},
    }
    with httpx.Client(timeout=httpx.Timeout(STREAM_TIMEOUT_S, connect=CONNECT_TIMEOUT_S)) as client:
        with client.stream("POST", url, json=body, headers={"Authorization": f"Bearer {api_key}"}) as response:
            _raise_for_chat_status(response)
            for data in _sse_data_lines(response):
                delta = json.loads(data)["choices"][0].get("delta", {})
                piece = delta.get("content")
                if piece:
                    yield piece


def _claude_stream(settings: LlmSettings, api_key: str, history: list[dict]) -> Iterator[str]:
    url = (settings.base_url or "https://api.anthropic.com/v1").rstrip("/") + "/messages"
    body = {
        "model": settings.model,
        "messages": [{"role": m["role"], "content": m["text"]} for m in history],
        "max_tokens": settings.params.get("max_tokens", 1024),
        "stream": True,
    }
    headers = {"x-api-key": api_key, "anthropic-version": "2023-06-01"}
    with httpx.Client(timeout=httpx.Timeout(STREAM_TIMEOUT_S, connect=CONNECT_TIMEOUT_S)) as client:
        with client.stream("POST", url, json=body, headers=headers) as response:
            _raise_for_chat_status(response)
            for data in _sse_data_lines(response):
                frame = json.loads(data)
                if frame.get("type") == "content_block_delta":
                    piece = frame.get("delta", {}).get("text")
                    if piece:
                        yield piece


def _gemini_stream(settings: LlmSettings, api_key: str, history: list[dict]) -> Iterator[str]:
    base = settings.base_url or "https://generativelanguage.googleapis.com/v1beta"
    url = f"{base.rstrip('/')}/models/{settings.model}:streamGenerateContent?alt=sse&key={api_key}"
    contents = [
        {"role": "user" if m["role"] == "user" else "model", "parts": [{"text": m["text"]}]}
        for m in history
    ]
    with httpx.Client(timeout=httpx.Timeout(STREAM_TIMEOUT_S, connect=CONNECT_TIMEOUT_S)) as client:
        with client.stream("POST", url, json={"contents": contents}) as response:
            _raise_for_chat_status(response)
            for data in _sse_data_lines(response):
                frame = json.loads(data)
                for candidate in frame.get("candidates", []):
                    for part in candidate.get("content", {}).get("parts", []):
                        if part.get("text"):
                            yield part["text"]


def _raise_for_chat_status(response: httpx.Response) -> None:
    if response.status_code in (401, 403):
        raise AuthError(f"provider rejected credentials (HTTP {response.status_code})")
    if response.status_code == 400:
        response.read()
        raise ContentError(f"provider refused request: {response.text[:300]}")
    if response.status_code >= 500 or response.status_code == 429:
        raise ProviderUnavailable(f"provider returned HTTP {response.status_code}")
    response.raise_for_status()


_CHAT_ADAPTERS = {
    "openai-compatible": _openai_stream,
    "claude-compatible": _claude_stream,
    "gemini-compatible": _gemini_stream,
}


class ProviderGateway:
    """Stateless facade over the configured chat and search providers."""

    def __init__(self, config: ProviderConfig, credentials: Optional[dict] = None) -> None:
        self.config = config
        self.credentials = credentials or {}
        self._corpus: Optional[list[CorpusDoc]] = None

    def _api_key(self, ref: str) -> str:
        key = self.credentials.get(ref, "")
        if not key:
            raise AuthError(f"no credential stored under {ref!r}")
        return key

    def chat_complete(self, history: list[dict]) -> Iterator[StreamChunk]:
        """Stream a reply to the last (user) entry of ``history``.

        Chunk indexes are dense from 0 and exactly one chunk is final. A
        mid-stream provider failure raises after the chunks that did
        arrive, so callers can preserve the partial text.
        """
        if not history:
            raise ValueError("history must not be empty")
        if history[-1]["role"] != "user":
            raise ValueError("last history entry must be the user prompt")
        settings = self.config.llm
        if settings.provider == "mock-echo":
            yield from mock_echo_stream(history)
            return
        adapter = _CHAT_ADAPTERS.get(settings.provider)
        if adapter is None:
            raise StudyKitError(f"unknown chat provider {settings.provider!r}")
        pieces = adapter(settings, self._api_key(settings.api_key_ref), history)
        yield from _indexed(pieces)

    def search(self, query_text: str) -> ResultPage:
        """Ranked results for a query; ranks are dense from 1.

        Raises EmptyResults when nothing matched (the page is empty but
        well-formed)."""
        if not query_text.strip():
            raise ValueError("query must not be empty")
        settings = self.config.search
        if settings.provider == "mock-corpus":
            if self._corpus is None:
                self._corpus = load_corpus(settings.corpus_path or None)
            results = mock_corpus_search(query_text, settings.results_per_query, self._corpus)
        elif settings.provider == "generic-search-api":
            results = self._generic_search(query_text)
        else:
            raise StudyKitError(f"unknown search provider {settings.provider!r}")
        page = ResultPage(query_text=query_text, results=results)
        if not results:
            raise EmptyResults(page)
        return page

    def _generic_search(self, query_text: str) -> list[SearchResult]:
        settings = self.config.search
        if not settings.base_url:
            raise StudyKitError("generic-search-api needs a base_url")
        headers = {}
        if settings.api_key_ref:
            headers["Authorization"] = f"Bearer {self._api_key(settings.api_key_ref)}"
        try:
            response = httpx.get(
                settings.base_url,
                params={"q": query_text, "count": settings.results_per_query},
                headers=headers,
                timeout=CONNECT_TIMEOUT_S,
            )
        except httpx.HTTPError as exc:
            raise ProviderUnavailable(str(exc)) from exc
        if response.status_code in (401, 403):
            raise AuthError(f"search provider rejected credentials (HTTP {response.status_code})")
        if response.status_code != 200:
            raise ProviderUnavailable(f"search provider returned HTTP {response.status_code}")
        items = response.json().get("results", [])
        return [
            SearchResult(
                rank=i + 1,
                title=item.get("title", ""),
                url=item.get("url", ""),
                snippet=item.get("snippet", ""),
            )
            for i, item in enumerate(items[: settings.results_per_query])
        ]

    def verify_credentials(self, probe_timeout_s: float = CONNECT_TIMEOUT_S) -> dict[str, str]:
        """Probe each configured provider; returns statuses, never raises.

        Statuses: ``ok``, ``auth-failed``, ``unreachable``.
        """
        return {
            "llm": self._verify_llm(probe_timeout_s),
            "search": self._verify_search(probe_timeout_s),
        }

    def _verify_llm(self, timeout_s: float) -> str:
        settings = self.config.llm
        if settings.provider == "mock-echo":
            return "ok"
        try:
            key = self._api_key(settings.api_key_ref)
        except AuthError:
            return "auth-failed"
        probes = {
            "openai-compatible": lambda: httpx.get(
                (settings.base_url or "https://api.openai.com/v1").rstrip("/") + "/models",
                headers={"Authorization": f"Bearer {key}"},
                timeout=timeout_s,
            ),
            "claude-compatible": lambda: httpx.get(
                (settings.base_url or "https://api.anthropic.com/v1").rstrip("/") + "/models",
                headers={"x-api-key": key, "anthropic-version": "2023-06-01"},
                timeout=timeout_s,
            ),
            "gemini-compatible": lambda: httpx.get(
                (settings.base_url or "https://generativelanguage.googleapis.com/v1beta").rstrip("/")
                + f"/models?key={key}",
                timeout=timeout_s,
            ),
        }
        probe = probes.get(settings.provider)
        if probe is None:
            return "auth-failed"
        return self._probe_status(probe)

    def _verify_search(self, timeout_s: float) -> str:
        settings = self.config.search
        if settings.provider == "mock-corpus":
            try:
                load_corpus(settings.corpus_path or None)
                return "ok"
            except Exception:
                return "unreachable"
        if not settings.base_url:
            return "unreachable"
        headers = {}
        if settings.api_key_ref:
            try:
                headers["Authorization"] = f"Bearer {self._api_key(settings.api_key_ref)}"
            except AuthError:
                return "auth-failed"
        return self._probe_status(
            lambda: httpx.get(settings.base_url, params={"q": "ping", "count": 1}, headers=headers, timeout=timeout_s)
        )

    @staticmethod
    def _probe_status(probe) -> str:
        try:
            response = probe()
        except httpx.HTTPError:
            return "unreachable"
        if response.status_code in (401, 403):
            return "auth-failed"
        if response.status_code >= 500:
            return "unreachable"
        return "ok"


def _indexed(pieces: Iterator[str]) -> Iterator[StreamChunk]:
    """Wrap raw text pieces into dense-indexed chunks with one final marker.

    The last piece carries is_final, so buffer one piece of lookahead.
    """
    index = 0
    previous: Optional[str] = None
    for piece in pieces:
        if previous is not None:
            yield StreamChunk(chunk_index=index, text=previous, is_final=False)
            index += 1
        previous = piece
    if previous is not None:
        yield StreamChunk(chunk_index=index, text=previous, is_final=True)
    else:
        yield StreamChunk(chunk_index=0, text="", is_final=True)
