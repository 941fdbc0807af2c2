"""Focused-crawl frontier: seed profiles per spider, URL normalization and
dedup, depth/scope control, lexical pre-filter, politeness scheduling.

The named spiders (ache/sitemap/ahmia/wiki1/wiki2) differ only in their
seeds, scope and keywords, so they are profile presets, not code paths.
"""

from __future__ import annotations

import re
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from html.parser import HTMLParser
from typing import Optional
from urllib.parse import urljoin, urlsplit, urlunsplit

from .core import SPIDER_NAMES, utc_now

_DEFAULT_PORTS = {"http": 80, "https": 443, "ftp": 21}


class UrlError(ValueError):
    pass


def _remove_dot_segments(path: str) -> str:
    # RFC 3986 §5.2.4
    output: list[str] = []
    for segment in path.split("/"):
        if segment == ".":
            continue
        if segment == "..":
            if output and output[-1] != "":
                output.pop()
                if not output:
                    output = [""]
        else:
            output.append(segment)
    result = "/".join(output)
    if path.startswith("/") and not result.startswith("/"):
        result = "/" + result
    return result


def normalize_url(url: str) -> str:
    """Canonical form: lowercase scheme/host, default port stripped,
    dot-segments resolved, fragment removed."""
    url = url.strip()
    if any(ch.isspace() for ch in url):
        raise UrlError(f"whitespace inside url {url!r}")
    try:
        parts = urlsplit(url)
    except ValueError as exc:
        raise UrlError(f"unparseable url {url!r}: {exc}") from exc
    scheme = parts.scheme.lower()
    if scheme not in ("http", "https", "ftp"):
        raise UrlError(f"unsupported or missing scheme in {url!r}")
    if not parts.hostname:
        raise UrlError(f"missing host in {url!r}")
    host = parts.hostname.lower()
    try:
        port = parts.port
    except ValueError as exc:
        raise UrlError(f"invalid port in {url!r}: {exc}") from exc
    netloc = host
    if port is not None and port != _DEFAULT_PORTS.get(scheme):
        netloc = f"{host}:{port}"
    if parts.username:
        userinfo = parts.username + (f":{parts.password}" if parts.password else "")
        netloc = f"{userinfo}@{netloc}"
    path = _remove_dot_segments(parts.path) or "/"
    return urlunsplit((scheme, netloc, path, parts.query, ""))


def url_host(url: str) -> str:
    return urlsplit(url).hostname or ""


def is_onion(url: str) -> bool:
    return url_host(url).endswith(".onion")


# ---------------------------------------------------------------------------
# profiles and tasks

@dataclass(frozen=True)
class SpiderProfile:
    """Seed list, scope rule, depth bound, politeness delay and keywords
    defining one spider; presets only differ in these fields."""

    name: str
    seeds: tuple[str, ...]
    scope: str = "open"  # host_allowlist | onion_only | open
    allowed_hosts: frozenset[str] = frozenset()
    max_depth: int = 3
    min_delay_seconds: float = 1.0
    keywords: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.seeds:
            raise ValueError(f"profile {self.name!r} has no seeds")
        if self.scope not in ("host_allowlist", "onion_only", "open"):
            raise ValueError(f"unknown scope rule {self.scope!r}")
        if self.scope == "host_allowlist" and not self.allowed_hosts:
            raise ValueError(f"profile {self.name!r}: host_allowlist scope needs hosts")

    def in_scope(self, url: str) -> bool:
        host = url_host(url)
        if self.scope == "onion_only":
            return host.endswith(".onion")
        if self.scope == "host_allowlist":
            return host in self.allowed_hosts or any(
                host.endswith("." + h) for h in self.allowed_hosts)
        # open scope still never wanders onto onion hosts by accident
        return not host.endswith(".onion")

    @property
    def keyword_patterns(self) -> tuple[re.Pattern, ...]:
        return tuple(re.compile(k, re.IGNORECASE) for k in self.keywords)


def load_seed_file(path: str) -> tuple[str, ...]:
    """One url per line; '#' comments and blank lines ignored."""
    seeds = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                seeds.append(normalize_url(line))
    return tuple(seeds)


@dataclass(frozen=True)
class CrawlTask:
    url: str
    spider: str
    depth: int = 0
    discovered_from: Optional[str] = None
    enqueued_at: datetime = field(default_factory=utc_now)

    def __post_init__(self):
        if self.spider not in SPIDER_NAMES:
            raise ValueError(f"unknown spider {self.spider!r}")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")


@dataclass(frozen=True)
class EnqueueResult:
    accepted: bool
    reason: Optional[str] = None  # duplicate | scope | depth


def lexical_prefilter(text: str, profile: SpiderProfile) -> bool:
    """True iff any profile keyword pattern matches; an empty keyword list
    passes everything through."""
    if not profile.keywords:
        return True
    return any(p.search(text) for p in profile.keyword_patterns)


# ---------------------------------------------------------------------------
# the frontier

class Frontier:
    """Politeness-aware FIFO frontier with visited-set dedup.

    All mutations are serialized behind one lock; many fetch workers may
    call enqueue/next_ready concurrently. Seeds outrank discovered urls.
    """

    def __init__(self, profile: SpiderProfile):
        self.profile = profile
        self._lock = threading.Lock()
        self._seen: set[str] = set()
        self._seed_queue: deque[CrawlTask] = deque()
        self._disc_queue: deque[CrawlTask] = deque()
        self._last_dispatch: dict[str, float] = {}
        self.accepted = 0
        self.dispatched = 0
        self.rejected: dict[str, int] = {"duplicate": 0, "scope": 0, "depth": 0}

    def seed(self) -> int:
        count = 0
        for url in self.profile.seeds:
            if self.enqueue(CrawlTask(url=url, spider=self.profile.name, depth=0)).accepted:
                count += 1
        return count

    def enqueue(self, task: CrawlTask) -> EnqueueResult:
        with self._lock:
            if task.depth > self.profile.max_depth:
                self.rejected["depth"] += 1
                return EnqueueResult(False, "depth")
            if not self.profile.in_scope(task.url):
                self.rejected["scope"] += 1
                return EnqueueResult(False, "scope")
            if task.url in self._seen:
                self.rejected["duplicate"] += 1
                return EnqueueResult(False, "duplicate")
            self._seen.add(task.url)
            if task.discovered_from is None:
                self._seed_queue.append(task)
            else:
                self._disc_queue.append(task)
            self.accepted += 1
            return EnqueueResult(True)

    def next_ready(self, now: float) -> Optional[CrawlTask]:
        """Oldest eligible task whose host's last dispatch + min delay <= now;
        marks the dispatch time."""
        with self._lock:
            for queue in (self._seed_queue, self._disc_queue):
                for i, task in enumerate(queue):
                    host = url_host(task.url)
                    last = self._last_dispatch.get(host)
                    if last is None or last + self.profile.min_delay_seconds <= now:
                        del queue[i]
                        self._last_dispatch[host] = now
                        self.dispatched += 1
                        return task
            return None

    def pending(self) -> int:
        with self._lock:
            return len(self._seed_queue) + len(self._disc_queue)

    def next_eligible_at(self) -> Optional[float]:
        """Earliest moment any queued task could dispatch, None when empty."""
        with self._lock:
            times = []
            for queue in (self._seed_queue, self._disc_queue):
                for task in queue:
                    last = self._last_dispatch.get(url_host(task.url))
                    times.append(0.0 if last is None else last + self.profile.min_delay_seconds)
            return min(times) if times else None

    def snapshot_visited(self, path: str) -> None:
        with self._lock:
            with open(path, "w", encoding="utf-8") as fh:
                for url in sorted(self._seen):
                    fh.write(url + "\n")

    def restore_visited(self, path: str) -> None:
        with self._lock:
            with open(path, encoding="utf-8") as fh:
                self._seen.update(line.strip() for line in fh if line.strip())


# ---------------------------------------------------------------------------
# link extraction

class _AnchorParser(HTMLParser):
    def __init__(self):
        super().__init__()
        self.hrefs: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag == "a":
            for name, value in attrs:
                if name == "href" and value:
                    self.hrefs.append(value)


def extract_links(html: str, base: str) -> list[str]:
    """Anchor hrefs resolved against base, normalized, deduped, document
    order; malformed hrefs are skipped."""
    parser = _AnchorParser()
    try:
        parser.feed(html)
    except Exception:
        pass  # salvage whatever was parsed before the markup broke
    seen: set[str] = set()
    out: list[str] = []
    for href in parser.hrefs:
        try:
            url = normalize_url(urljoin(base, href.strip()))
        except (UrlError, ValueError):
            continue
        if url not in seen:
            seen.add(url)
            out.append(url)
    return out


# ---------------------------------------------------------------------------
# presets

def builtin_profiles() -> dict[str, SpiderProfile]:
    """Stand-in presets for the five named spiders; real deployments override
    seeds and keywords in the pipeline config."""
    cti_keywords = (r"malware", r"ransomware", r"\bC2\b", r"CVE-", r"botnet",
                    r"phishing", r"exploit", r"\bIOC\b", r"indicator", r"breach")
    return {
        "ache": SpiderProfile(
            name="ache", seeds=("http://ache.seeds.invalid/",),
            scope="open", keywords=cti_keywords),
        "sitemap": SpiderProfile(
            name="sitemap", seeds=("http://sitemap.seeds.invalid/",),
            scope="host_allowlist", allowed_hosts=frozenset({"sitemap.seeds.invalid"}),
            keywords=cti_keywords),
        "ahmia": SpiderProfile(
            name="ahmia", seeds=("http://ahmiaseedsinvalid.onion/",),
            scope="onion_only", keywords=cti_keywords),
        "wiki1": SpiderProfile(
            name="wiki1", seeds=("http://wiki1seedsinvalid.onion/",),
            scope="onion_only", keywords=cti_keywords),
        "wiki2": SpiderProfile(
            name="wiki2", seeds=("http://wiki2seedsinvalid.onion/",),
            scope="onion_only", keywords=cti_keywords),
    }
