"""Shared domain vocabulary: indicator types, documents, spans, verdicts.

Everything here is immutable after construction and safe to share across
concurrent pipeline stages. Canonical JSON serialization of Indicator and
Document is the record format on the bus and in the sink.
"""

from __future__ import annotations

import hashlib
import ipaddress
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Optional
from urllib.parse import urlsplit, urlunsplit


class IndicatorType(str, Enum):
    """Closed set of supported atomic IOC kinds."""

    IPV4 = "ipv4"
    IPV6 = "ipv6"
    URL = "url"
    DOMAIN = "domain"
    EMAIL = "email"
    MD5 = "md5"
    SHA1 = "sha1"
    SHA256 = "sha256"
    CVE = "cve"


HASH_LENGTHS = {32: IndicatorType.MD5, 40: IndicatorType.SHA1, 64: IndicatorType.SHA256}

NER_LABELS = ("Malware", "Indicator", "System", "Organization", "Vulnerability")

SPIDER_NAMES = ("ache", "sitemap", "ahmia", "wiki1", "wiki2")

# Tokens that must never survive into a canonical indicator value.
DEFANG_TOKENS = ("[.]", "(.)", "[dot]", "(dot)", "hxxp", "[:]", "[at]", "(at)")

_HEX_RE = re.compile(r"^[0-9a-fA-F]+$")
_CVE_RE = re.compile(r"^CVE-\d{4}-\d{4,}$", re.IGNORECASE)
_DOMAIN_LABEL_RE = re.compile(r"^[a-zA-Z0-9](?:[a-zA-Z0-9-]*[a-zA-Z0-9])?$")
_EMAIL_LOCAL_RE = re.compile(r"^[A-Za-z0-9._%+-]+$")
_URL_SCHEMES = ("http", "https", "ftp", "ftps")


class ValidationError(ValueError):
    """An indicator value failed its kind-specific validity rules."""

    def __init__(self, value: str, kind: IndicatorType, violations: list[str]):
        self.value = value
        self.kind = kind
        self.violations = violations
        super().__init__(f"{kind.value} {value!r}: " + "; ".join(violations))


def _validate_domain(value: str) -> list[str]:
    violations = []
    if not value:
        return ["empty value"]
    if "." not in value:
        violations.append("domain must contain at least one dot")
    labels = value.split(".")
    for label in labels:
        if not _DOMAIN_LABEL_RE.match(label):
            violations.append(f"invalid domain label {label!r}")
            break
    tld = labels[-1]
    if not (len(tld) >= 2 and tld.isalpha()):
        violations.append("final label must be >=2 alphabetic chars")
    if len(value) > 253:
        violations.append("domain exceeds 253 chars")
    return violations


def _validate_ipv4(value: str) -> list[str]:
    parts = value.split(".")
    if len(parts) != 4:
        return ["ipv4 must have 4 dotted octets"]
    violations = []
    for part in parts:
        if not part.isdigit() or len(part) > 3:
            violations.append(f"octet {part!r} not a 1-3 digit number")
        elif int(part) > 255:
            violations.append(f"octet {part} out of range 0-255")
    return violations


def validate_indicator(value: str, kind: IndicatorType) -> list[str]:
    """Return every violated kind-specific rule; empty list when valid."""
    if not value:
        return ["empty value"]
    for token in DEFANG_TOKENS:
        if token in value.lower():
            return [f"defang token {token!r} present"]
    if kind in (IndicatorType.MD5, IndicatorType.SHA1, IndicatorType.SHA256):
        expected = {IndicatorType.MD5: 32, IndicatorType.SHA1: 40, IndicatorType.SHA256: 64}[kind]
        violations = []
        if not _HEX_RE.match(value):
            violations.append("not a hex string")
        if len(value) != expected:
            violations.append(f"length {len(value)} != {expected}")
        return violations
    if kind is IndicatorType.IPV4:
        return _validate_ipv4(value)
    if kind is IndicatorType.IPV6:
        try:
            ipaddress.IPv6Address(value)
            return []
        except (ipaddress.AddressValueError, ValueError):
            return ["not a valid ipv6 address"]
    if kind is IndicatorType.CVE:
        return [] if _CVE_RE.match(value) else ["does not match CVE-YYYY-NNNN+"]
    if kind is IndicatorType.DOMAIN:
        return _validate_domain(value)
    if kind is IndicatorType.EMAIL:
        if value.count("@") != 1:
            return ["email must contain exactly one '@'"]
        local, _, host = value.partition("@")
        violations = []
        if not _EMAIL_LOCAL_RE.match(local):
            violations.append("invalid local part")
        violations.extend(_validate_domain(host))
        return violations
    if kind is IndicatorType.URL:
        try:
            parts = urlsplit(value)
        except ValueError:
            return ["unparseable URI"]
        violations = []
        if parts.scheme.lower() not in _URL_SCHEMES:
            violations.append(f"unsupported scheme {parts.scheme!r}")
        if not parts.hostname:
            violations.append("missing host")
        if any(ch.isspace() for ch in value):
            violations.append("whitespace in URL")
        return violations
    raise AssertionError(f"unhandled kind {kind}")


def canonicalize(value: str, kind: IndicatorType) -> str:
    """Case-normalize a *valid* value to its canonical form.

    Hashes, domains and emails are lowercased; CVE ids uppercased; URLs
    lowercase only scheme and host (path/query case is significant);
    "http://a/" and "http://a" stay distinct on purpose.
    """
    if kind in (IndicatorType.MD5, IndicatorType.SHA1, IndicatorType.SHA256,
                IndicatorType.DOMAIN, IndicatorType.EMAIL):
        return value.lower()
    if kind is IndicatorType.CVE:
        return value.upper()
    if kind is IndicatorType.IPV4:
        return ".".join(str(int(p)) for p in value.split("."))
    if kind is IndicatorType.IPV6:
        return str(ipaddress.IPv6Address(value))
    if kind is IndicatorType.URL:
        parts = urlsplit(value)
        # lowercase scheme and host:port, preserve userinfo/path/query case
        userinfo, sep, hostport = parts.netloc.rpartition("@")
        netloc = userinfo + sep + hostport.lower()
        return urlunsplit((parts.scheme.lower(), netloc, parts.path, parts.query, parts.fragment))
    raise AssertionError(f"unhandled kind {kind}")


def indicator_key(value: str, kind: IndicatorType) -> str:
    """Deterministic dedup key; equal keys iff indicators are duplicates.

    Raises ValidationError when the (already refanged) value fails its
    kind-specific rules.
    """
    violations = validate_indicator(value, kind)
    if violations:
        raise ValidationError(value, kind, violations)
    return f"{kind.value}:{canonicalize(value, kind)}"


# ---------------------------------------------------------------------------
# timestamps

def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def to_rfc3339(ts: datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def from_rfc3339(raw: str) -> datetime:
    return datetime.fromisoformat(raw.replace("Z", "+00:00")).astimezone(timezone.utc)


# ---------------------------------------------------------------------------
# sources

class Channel(str, Enum):
    TWITTER = "twitter"
    CLEAR_WEB = "clear_web"
    DARK_WEB = "dark_web"


@dataclass(frozen=True, order=True)
class SourceKind:
    """Origin of a document: a channel, plus the spider name for web channels."""

    channel: Channel
    spider: Optional[str] = None

    def __post_init__(self):
        is_web = self.channel in (Channel.CLEAR_WEB, Channel.DARK_WEB)
        if is_web and self.spider is None:
            raise ValueError(f"{self.channel.value} source requires a spider name")
        if not is_web and self.spider is not None:
            raise ValueError("spider name only valid for web sources")
        if self.spider is not None and self.spider not in SPIDER_NAMES:
            raise ValueError(f"unknown spider {self.spider!r}")

    def to_wire(self) -> str:
        if self.spider is None:
            return self.channel.value
        return f"{self.channel.value}/{self.spider}"

    @classmethod
    def from_wire(cls, raw: str) -> "SourceKind":
        channel, _, spider = raw.partition("/")
        return cls(Channel(channel), spider or None)


# ---------------------------------------------------------------------------
# verification

@dataclass(frozen=True)
class VerificationStatus:
    """Per-provider reputation lookup outcome; found=None means unknown."""

    provider: str
    found: Optional[bool]
    checked_at: Optional[datetime] = None
    ttl_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "provider": self.provider,
            "found": self.found,
            "checked_at": to_rfc3339(self.checked_at) if self.checked_at else None,
            "ttl_seconds": self.ttl_seconds,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "VerificationStatus":
        return cls(
            provider=d["provider"],
            found=d["found"],
            checked_at=from_rfc3339(d["checked_at"]) if d.get("checked_at") else None,
            ttl_seconds=d.get("ttl_seconds", 0.0),
        )


# ---------------------------------------------------------------------------
# indicators

@dataclass(frozen=True)
class Indicator:
    """A typed, refanged, deduplicatable atomic IOC with provenance.

    Equality and hashing consider only (kind, value) so duplicates collapse
    regardless of where or when they were seen.
    """

    value: str
    kind: IndicatorType
    first_seen: datetime = field(default_factory=utc_now)
    sources: frozenset[SourceKind] = frozenset()
    defanged_form: Optional[str] = None
    verification: tuple[VerificationStatus, ...] = ()

    def __post_init__(self):
        violations = validate_indicator(self.value, self.kind)
        if violations:
            raise ValidationError(self.value, self.kind, violations)
        canonical = canonicalize(self.value, self.kind)
        if canonical != self.value:
            object.__setattr__(self, "value", canonical)

    @property
    def key(self) -> str:
        return f"{self.kind.value}:{self.value}"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Indicator):
            return NotImplemented
        return self.kind == other.kind and self.value == other.value

    def __hash__(self) -> int:
        return hash((self.kind, self.value))

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "kind": self.kind.value,
            "first_seen": to_rfc3339(self.first_seen),
            "sources": sorted(s.to_wire() for s in self.sources),
            "defanged_form": self.defanged_form,
            "verification": [v.to_json_dict() for v in self.verification],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, d: dict) -> "Indicator":
        return cls(
            value=d["value"],
            kind=IndicatorType(d["kind"]),
            first_seen=from_rfc3339(d["first_seen"]),
            sources=frozenset(SourceKind.from_wire(s) for s in d.get("sources", [])),
            defanged_form=d.get("defanged_form"),
            verification=tuple(VerificationStatus.from_json_dict(v) for v in d.get("verification", [])),
        )

    @classmethod
    def from_json(cls, raw: str) -> "Indicator":
        return cls.from_json_dict(json.loads(raw))


# ---------------------------------------------------------------------------
# relevance

@dataclass(frozen=True)
class RelevanceVerdict:
    score: float
    relevant: bool
    granularity: str  # "sentence" | "page"
    model_id: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0,1]")
        if self.granularity not in ("sentence", "page"):
            raise ValueError(f"granularity must be sentence or page, got {self.granularity!r}")

    @classmethod
    def from_score(cls, score: float, threshold: float, granularity: str, model_id: str) -> "RelevanceVerdict":
        return cls(score=score, relevant=score >= threshold, granularity=granularity, model_id=model_id)

    def to_json_dict(self) -> dict:
        return {
            "score": self.score,
            "relevant": self.relevant,
            "granularity": self.granularity,
            "model_id": self.model_id,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RelevanceVerdict":
        return cls(score=d["score"], relevant=d["relevant"],
                   granularity=d["granularity"], model_id=d["model_id"])


# ---------------------------------------------------------------------------
# entity spans

@dataclass(frozen=True)
class EntitySpan:
    """An NER-labeled character span over document text."""

    label: str
    start: int
    end: int
    text: str

    def __post_init__(self):
        if self.label not in NER_LABELS:
            raise ValueError(f"unknown entity label {self.label!r}")
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span offsets [{self.start}, {self.end})")

    def matches(self, host_text: str) -> bool:
        """True iff the span's text equals the slice it claims to cover."""
        return self.end <= len(host_text) and host_text[self.start:self.end] == self.text


# ---------------------------------------------------------------------------
# documents

def document_id(source: SourceKind, ref: str, raw_text: str) -> str:
    """Stable content-hash identity; identical inputs yield identical ids."""
    h = hashlib.sha256()
    for part in (source.to_wire(), ref, raw_text):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


@dataclass(frozen=True)
class Document:
    """A unit of ingested content (web page or post) with extraction state."""

    source: SourceKind
    ref: str  # url for web sources, post id for stream sources
    raw_text: str
    fetched_at: datetime = field(default_factory=utc_now)
    relevance: Optional[RelevanceVerdict] = None
    indicators: tuple[Indicator, ...] = ()
    context_tags: tuple[tuple[str, str], ...] = ()  # (label, text) from NER

    @property
    def id(self) -> str:
        return document_id(self.source, self.ref, self.raw_text)

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "source": self.source.to_wire(),
            "ref": self.ref,
            "raw_text": self.raw_text,
            "fetched_at": to_rfc3339(self.fetched_at),
            "relevance": self.relevance.to_json_dict() if self.relevance else None,
            "indicators": [i.to_json_dict() for i in self.indicators],
            "context_tags": [list(t) for t in self.context_tags],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, d: dict) -> "Document":
        return cls(
            source=SourceKind.from_wire(d["source"]),
            ref=d["ref"],
            raw_text=d["raw_text"],
            fetched_at=from_rfc3339(d["fetched_at"]),
            relevance=RelevanceVerdict.from_json_dict(d["relevance"]) if d.get("relevance") else None,
            indicators=tuple(Indicator.from_json_dict(i) for i in d.get("indicators", [])),
            context_tags=tuple(tuple(t) for t in d.get("context_tags", [])),
        )

    @classmethod
    def from_json(cls, raw: str) -> "Document":
        return cls.from_json_dict(json.loads(raw))
