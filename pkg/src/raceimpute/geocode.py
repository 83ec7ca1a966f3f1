"""Address -> census tract GEOID resolution via the Census Geocoder API,
with a persistent line-oriented cache and a fully offline mode."""

from __future__ import annotations

import json
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from .errors import ApiFormatError, InvariantError, NetworkError, RateLimited

GEOCODER_URL = "https://geocoding.geo.census.gov/geocoder/geographies/onelineaddress"
DEFAULT_BENCHMARK = "Public_AR_Current"
DEFAULT_VINTAGE = "Current_Current"

# transport: (url, params, timeout) -> parsed JSON body
Transport = Callable[[str, dict, float], dict]


@dataclass(frozen=True)
class GeocodeResult:
    address: str
    matched: bool
    geoid: str | None
    quality: str
    source: str  # api | cache | offline-table

    def __post_init__(self):
        if self.matched and (self.geoid is None or len(self.geoid) != 11 or not self.geoid.isdigit()):
            raise InvariantError(f"matched result must carry an 11-digit geoid, got {self.geoid!r}")


def normalize_address(address: str) -> str:
    """Upper-case, collapse whitespace, strip punctuation except '#'."""
    text = address.upper()
    text = re.sub(r"[^A-Z0-9# ]+", " ", text)
    return " ".join(text.split())


def requests_transport(url: str, params: dict, timeout: float) -> dict:
    import requests

    try:
        response = requests.get(url, params=params, timeout=timeout)
    except requests.RequestException as exc:
        raise NetworkError(f"geocoder request failed: {exc}") from exc
    if response.status_code == 429:
        raise RateLimited("geocoder rate limit hit (HTTP 429)")
    if response.status_code >= 500:
        raise NetworkError(f"geocoder server error HTTP {response.status_code}")
    if response.status_code != 200:
        raise ApiFormatError(f"geocoder returned HTTP {response.status_code}")
    try:
        return response.json()
    except ValueError as exc:
        raise ApiFormatError(f"geocoder returned non-JSON body: {exc}") from exc


def parse_tract_geoid(body: dict) -> tuple[bool, str | None, str]:
    """Extract (matched, geoid, quality) from a geographies response."""
    try:
        matches = body["result"]["addressMatches"]
    except (KeyError, TypeError) as exc:
        raise ApiFormatError(f"unexpected geocoder response shape: {exc}") from exc
    if not matches:
        return False, None, "no_match"
    match = matches[0]
    quality = str(match.get("matchType") or "match")
    geographies = match.get("geographies") or {}
    tracts = geographies.get("Census Tracts") or []
    if not tracts:
        raise ApiFormatError("address matched but response carries no Census Tracts block")
    geoid = str(tracts[0].get("GEOID") or "")
    if len(geoid) != 11 or not geoid.isdigit():
        raise ApiFormatError(f"GEOID {geoid!r} is not 11 decimal digits")
    return True, geoid, quality


class GeocodeCache:
    """Append-only JSONL cache keyed by normalized address."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, tuple[bool, str | None, str]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, "r", encoding="utf-8") as handle:
                for line in handle:
                    line = line.strip()
                    if not line:
                        continue
                    obj = json.loads(line)
                    self._entries[obj["address"]] = (obj["matched"], obj.get("geoid"), obj.get("quality", ""))

    def get(self, key: str) -> tuple[bool, str | None, str] | None:
        return self._entries.get(key)

    def put(self, key: str, matched: bool, geoid: str | None, quality: str) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = (matched, geoid, quality)
            if self.path is not None:
                record = {
                    "address": key,
                    "matched": matched,
                    "geoid": geoid,
                    "quality": quality,
                    "ts": datetime.now(timezone.utc).isoformat(),
                }
                with open(self.path, "a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record, sort_keys=True) + "\n")


class CensusGeocoderClient:
    """Cache-first client; in offline mode no transport call is ever made."""

    def __init__(
        self,
        cache_path: str | Path | None = None,
        transport: Transport | None = None,
        benchmark: str = DEFAULT_BENCHMARK,
        vintage: str = DEFAULT_VINTAGE,
        offline: bool = False,
        timeout: float = 20.0,
        max_attempts: int = 3,
        backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cache = GeocodeCache(cache_path)
        self.transport = transport  # None -> requests_transport at call time
        self.benchmark = benchmark
        self.vintage = vintage
        self.offline = offline
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.sleep = sleep

    def _request(self, address: str) -> dict:
        params = {
            "address": address,
            "benchmark": self.benchmark,
            "vintage": self.vintage,
            "format": "json",
        }
        transport = self.transport if self.transport is not None else requests_transport
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                return transport(GEOCODER_URL, params, self.timeout)
            except (NetworkError, RateLimited) as exc:
                last = exc
                if attempt + 1 < self.max_attempts:
                    self.sleep(self.backoff * (2.0**attempt))
        raise last

    def geocode_one(self, address: str) -> GeocodeResult:
        if not address.strip():
            raise InvariantError("empty address")
        key = normalize_address(address)
        hit = self.cache.get(key)
        if hit is not None:
            matched, geoid, quality = hit
            return GeocodeResult(address, matched, geoid, quality, "cache")
        if self.offline:
            return GeocodeResult(address, False, None, "offline_miss", "offline-table")
        body = self._request(address)
        matched, geoid, quality = parse_tract_geoid(body)
        self.cache.put(key, matched, geoid, quality)
        return GeocodeResult(address, matched, geoid, quality, "api")

    def geocode_batch(self, addresses: Sequence[str], concurrency_limit: int = 4) -> list[GeocodeResult]:
        """Resolve many addresses with bounded concurrency.

        Duplicate addresses resolve through a single lookup; output order
        matches input order; per-row failures surface as unmatched results
        with the error class name in the quality field.
        """
        if concurrency_limit < 1:
            raise InvariantError("concurrency_limit must be >= 1")
        unique = list(dict.fromkeys(normalize_address(a) for a in addresses))
        resolved: dict[str, GeocodeResult] = {}

        def work(key: str) -> tuple[str, GeocodeResult]:
            try:
                return key, self.geocode_one(key)
            except (NetworkError, RateLimited, ApiFormatError) as exc:
                return key, GeocodeResult(key, False, None, type(exc).__name__, "api")

        with ThreadPoolExecutor(max_workers=concurrency_limit) as pool:
            for key, result in pool.map(work, unique):
                resolved[key] = result
        out = []
        for address in addresses:
            base = resolved[normalize_address(address)]
            out.append(GeocodeResult(address, base.matched, base.geoid, base.quality, base.source))
        return out
