"""Forward geocoding: predicted address text -> coordinates."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from typing import Mapping, Protocol

import requests

from ..geo import GeoPoint
from .base import JsonFileCache, ProviderError, TokenBucket, normalize_key

logger = logging.getLogger(__name__)

GEOCODE_STATUSES = ("ok", "not_found", "provider_error")


@dataclass(frozen=True)
class GeocodeResult:
    query_text: str
    point: GeoPoint | None
    status: str

    def __post_init__(self) -> None:
        if self.status not in GEOCODE_STATUSES:
            raise ValueError(f"unknown geocode status {self.status!r}")
        if (self.status == "ok") != (self.point is not None):
            raise ValueError("status 'ok' must coincide with a point")


class GeocodeProvider(Protocol):
    def lookup(self, address: str) -> GeoPoint | None:
        """Return the point, None when not found; raise ProviderError on transport failure."""


class FixtureGeocodeProvider:
    """Serves ``{normalized address: {"lat": .., "lon": ..}}`` records."""

    def __init__(self, records: Mapping[str, Mapping]):
        self._records = {
            normalize_key(k): GeoPoint(float(v["lat"]), float(v["lon"])) for k, v in records.items()
        }

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "FixtureGeocodeProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def lookup(self, address: str) -> GeoPoint | None:
        return self._records.get(normalize_key(address))


class HttpGeocodeProvider:
    """POSTs ``{"address"}``; expects ``{"lat", "lon"}``, or 404 / ``{"status": "not_found"}``."""

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 20.0,
                 rate_limit: float | None = None, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self._bucket = TokenBucket(rate_limit) if rate_limit else None
        self._session = session or requests.Session()

    def lookup(self, address: str) -> GeoPoint | None:
        if self._bucket:
            self._bucket.acquire()
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._session.post(self.endpoint, json={"address": address},
                                      headers=headers, timeout=self.timeout)
            if resp.status_code == 404:
                return None
            resp.raise_for_status()
            payload = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise ProviderError(f"geocode request failed: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("status") == "not_found":
            return None
        try:
            return GeoPoint(float(payload["lat"]), float(payload["lon"]))
        except (KeyError, TypeError, ValueError):
            return None


class Geocoder:
    """Caching front end over a provider. Never raises: failures become statuses.

    Hits and not-founds are cached in memory (and on disk when ``cache_dir`` is
    set); provider errors are not, so a later retry can succeed.
    """

    def __init__(self, provider: GeocodeProvider, cache_dir: str | os.PathLike | None = None):
        self.provider = provider
        self._memo: dict[str, GeocodeResult] = {}
        self._lock = threading.Lock()
        self._disk = JsonFileCache(cache_dir) if cache_dir else None

    def geocode(self, address: str) -> GeocodeResult:
        key = normalize_key(address or "")
        if not key:
            return GeocodeResult(address or "", None, "not_found")
        with self._lock:
            cached = self._memo.get(key)
        if cached is not None:
            return GeocodeResult(address, cached.point, cached.status)
        if self._disk is not None:
            stored = self._disk.get(key)
            if stored is not None:
                point = GeoPoint(stored["lat"], stored["lon"]) if stored.get("lat") is not None else None
                result = GeocodeResult(address, point, "ok" if point else "not_found")
                with self._lock:
                    self._memo[key] = result
                return result
        try:
            point = self.provider.lookup(address)
        except ProviderError as exc:
            logger.warning("geocode failed for %r: %s", address, exc)
            return GeocodeResult(address, None, "provider_error")
        result = GeocodeResult(address, point, "ok" if point else "not_found")
        with self._lock:
            self._memo[key] = result
        if self._disk is not None:
            self._disk.put(key, {"lat": point.latitude, "lon": point.longitude} if point else {"lat": None})
        return result


def geocode(address: str, geocoder: Geocoder) -> GeocodeResult:
    return geocoder.geocode(address)


def load_geocoder(kind: str, *, path: str | None = None, endpoint: str | None = None,
                  api_key: str | None = None, cache_dir: str | None = None,
                  rate_limit: float | None = None, timeout: float = 20.0) -> Geocoder:
    if kind == "fixture":
        if not path:
            raise ValueError("fixture geocode provider needs a path")
        return Geocoder(FixtureGeocodeProvider.from_file(path))
    if kind == "http":
        if not endpoint:
            raise ValueError("http geocode provider needs an endpoint")
        return Geocoder(HttpGeocodeProvider(endpoint, api_key, timeout, rate_limit), cache_dir)
    raise ValueError(f"unknown geocode provider kind {kind!r}")
