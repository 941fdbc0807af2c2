"""Verification of extracted IOCs against external reputation providers.

A not-found result is a first-class outcome, never an error: the indicator
may simply be a novel threat nobody has indexed yet. Results are cached per
(indicator, provider) for a configurable ttl; the default mirrors the six
month verification window.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

import requests

from .core import Indicator, VerificationStatus, utc_now

DEFAULT_TTL_SECONDS = 6 * 30 * 24 * 3600.0  # six months


class Provider(Protocol):
    name: str

    def lookup(self, indicator: Indicator) -> bool:
        """True when the provider knows the indicator; may raise OSError or
        requests.RequestException on transport trouble."""


@dataclass
class FixtureProvider:
    """Offline provider backed by a JSON table: indicator key -> {provider: bool}.
    Indicators absent from the table are not-found."""

    name: str
    table: dict[str, dict[str, bool]] = field(default_factory=dict)

    @classmethod
    def load(cls, name: str, path: str) -> "FixtureProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(name=name, table=json.load(fh))

    def lookup(self, indicator: Indicator) -> bool:
        return bool(self.table.get(indicator.key, {}).get(self.name, False))


@dataclass
class HttpProvider:
    """Thin live client: GET {base_url}/{indicator key}, 200 means found,
    404 means not found. The API key comes from an env var and is never
    logged or echoed."""

    name: str
    base_url: str
    api_key_env: str
    timeout_seconds: float = 10.0
    session: Optional[requests.Session] = None

    def lookup(self, indicator: Indicator) -> bool:
        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise RuntimeError(f"provider {self.name}: env var {self.api_key_env} not set")
        resp = (self.session or requests).get(
            f"{self.base_url.rstrip('/')}/{indicator.key}",
            headers={"X-Api-Key": api_key}, timeout=self.timeout_seconds)
        if resp.status_code == 200:
            return True
        if resp.status_code == 404:
            return False
        raise requests.HTTPError(f"provider {self.name}: HTTP {resp.status_code}")


class Verifier:
    """Caches per-(indicator, provider) verdicts; within the ttl a repeated
    verify issues no new provider request."""

    def __init__(self, providers: list[Provider], ttl_seconds: float = DEFAULT_TTL_SECONDS,
                 clock=time.monotonic):
        self.providers = providers
        self.ttl_seconds = ttl_seconds
        self._clock = clock
        self._lock = threading.Lock()
        self._cache: dict[tuple[str, str], tuple[float, VerificationStatus]] = {}
        self.requests_issued = 0

    def cache_lookup(self, indicator: Indicator, provider_name: str) -> Optional[VerificationStatus]:
        """Hit iff previously verified within the ttl; None is a miss."""
        with self._lock:
            entry = self._cache.get((indicator.key, provider_name))
            if entry is None:
                return None
            stored_at, status = entry
            if self._clock() - stored_at > self.ttl_seconds:
                return None
            return status

    def verify(self, indicator: Indicator) -> list[VerificationStatus]:
        """Query each provider (through the cache). Transport errors yield
        an unknown status for that provider; it will be retried after a
        later cache miss."""
        statuses = []
        for provider in self.providers:
            cached = self.cache_lookup(indicator, provider.name)
            if cached is not None:
                statuses.append(cached)
                continue
            try:
                found = provider.lookup(indicator)
                status = VerificationStatus(provider=provider.name, found=found,
                                            checked_at=utc_now(), ttl_seconds=self.ttl_seconds)
            except (OSError, RuntimeError, requests.RequestException):
                status = VerificationStatus(provider=provider.name, found=None,
                                            checked_at=utc_now(), ttl_seconds=self.ttl_seconds)
            finally:
                self.requests_issued += 1
            if status.found is not None:
                with self._lock:
                    self._cache[(indicator.key, provider.name)] = (self._clock(), status)
            statuses.append(status)
        return statuses

    def apply(self, indicator: Indicator) -> Indicator:
        """Return a copy of the indicator carrying its verification statuses."""
        from dataclasses import replace
        return replace(indicator, verification=tuple(self.verify(indicator)))


def rollup(indicators: list[Indicator]) -> dict:
    """Desk-scale analog of the total / unique / verified IOC counts."""
    unique = {}
    for ind in indicators:
        unique.setdefault(ind.key, ind)
    verified = sum(
        1 for ind in unique.values()
        if any(v.found for v in ind.verification)
    )
    return {"total": len(indicators), "unique": len(unique), "verified": verified}
