"""Web search tool.

Providers share one small interface, ``search(query, limit) -> list[SearchResult]``,
with three implementations: a live HTTP client, an on-disk cache wrapped
around any provider, and a fixture provider that replays hand-written records.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence
from urllib.parse import urlparse

import requests

from .base import JsonFileCache, ProviderError, TokenBucket, ToolFailure, normalize_key

logger = logging.getLogger(__name__)

DEFAULT_LIMIT = 10
SNIPPET_CHARS = 500


@dataclass(frozen=True)
class SearchResult:
    title: str
    snippet: str
    url: str

    def __post_init__(self) -> None:
        parsed = urlparse(self.url or "")
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"not a URL: {self.url!r}")

    def to_dict(self) -> dict:
        return {"title": self.title, "snippet": self.snippet, "url": self.url}

    @classmethod
    def from_dict(cls, data: Mapping) -> "SearchResult":
        return cls(str(data.get("title") or ""), str(data.get("snippet") or ""), str(data.get("url") or ""))


class SearchProvider(Protocol):
    def search(self, query: str, limit: int) -> list[SearchResult]: ...


def _parse_results(records: Sequence[Mapping]) -> list[SearchResult]:
    results = []
    for record in records:
        try:
            results.append(SearchResult.from_dict(record))
        except ValueError:
            logger.debug("dropping search result without a valid url: %r", record)
    return results


class FixtureSearchProvider:
    """Replays results from a JSON object ``{normalized query: [result, ...]}``.

    Unknown queries return no results.
    """

    def __init__(self, records: Mapping[str, Sequence[Mapping]]):
        self._records = {normalize_key(k): _parse_results(v) for k, v in records.items()}

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "FixtureSearchProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def search(self, query: str, limit: int) -> list[SearchResult]:
        return list(self._records.get(normalize_key(query), []))[:limit]


class HttpSearchProvider:
    """POSTs ``{"query", "limit"}`` and expects a list of ``{title, snippet, url}``.

    A ``{"results": [...]}`` envelope is accepted too.
    """

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 20.0,
                 rate_limit: float | None = None, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self._bucket = TokenBucket(rate_limit) if rate_limit else None
        self._session = session or requests.Session()

    def search(self, query: str, limit: int) -> list[SearchResult]:
        if self._bucket:
            self._bucket.acquire()
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._session.post(self.endpoint, json={"query": query, "limit": limit},
                                      headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise ProviderError(f"search request failed: {exc}") from exc
        if isinstance(payload, dict):
            payload = payload.get("results", [])
        if not isinstance(payload, list):
            raise ProviderError("search response is not a result list")
        return _parse_results(payload)[:limit]


class CachedSearchProvider:
    """Caches another provider's responses on disk, keyed by normalized query and limit."""

    def __init__(self, inner: SearchProvider, cache_dir: str | os.PathLike, offline: bool = False):
        self.inner = inner
        self.cache = JsonFileCache(cache_dir)
        self.offline = offline
        self._lock = threading.Lock()

    def search(self, query: str, limit: int) -> list[SearchResult]:
        key = f"{limit}\t{normalize_key(query)}"
        hit = self.cache.get(key)
        if hit is not None:
            return _parse_results(hit)
        if self.offline:
            raise ProviderError(f"offline cache miss for {query!r}")
        results = self.inner.search(query, limit)
        self.cache.put(key, [r.to_dict() for r in results])
        return results


def search_web(query: str, provider: SearchProvider, limit: int = DEFAULT_LIMIT) -> list[SearchResult]:
    if not isinstance(query, str) or not query.strip():
        raise ToolFailure("empty query")
    if limit < 1:
        raise ValueError("limit must be >= 1")
    try:
        results = provider.search(query.strip(), limit)
    except ProviderError as exc:
        raise ToolFailure("search unavailable", str(exc)) from exc
    return list(results)[:limit]


def render_search_observation(query: str, results: Sequence[SearchResult]) -> str:
    if not results:
        return f'No web results found for "{query}".'
    lines = [f'Web search results for "{query}":']
    for i, r in enumerate(results, 1):
        snippet = " ".join(r.snippet.split())
        if len(snippet) > SNIPPET_CHARS:
            snippet = snippet[: SNIPPET_CHARS - 3].rstrip() + "..."
        lines.append(f"[{i}] {r.title}\n{snippet}\nURL: {r.url}")
    return "\n\n".join(lines)


def load_search_provider(kind: str, *, path: str | None = None, endpoint: str | None = None,
                         api_key: str | None = None, cache_dir: str | None = None,
                         rate_limit: float | None = None, timeout: float = 20.0) -> SearchProvider:
    if kind == "fixture":
        if not path:
            raise ValueError("fixture search provider needs a path")
        return FixtureSearchProvider.from_file(Path(path))
    if kind in ("http", "cached"):
        if not endpoint and kind == "http":
            raise ValueError("http search provider needs an endpoint")
        inner = HttpSearchProvider(endpoint, api_key, timeout, rate_limit) if endpoint else None
        if kind == "http":
            return inner
        if not cache_dir:
            raise ValueError("cached search provider needs a cache_dir")
        return CachedSearchProvider(inner, cache_dir, offline=inner is None)
    raise ValueError(f"unknown search provider kind {kind!r}")
