"""Rule-based IOC extraction with defang normalization (refanging).

The extractor refangs first, then scans with one pattern per indicator
kind. Every returned indicator passes validation; results are deduplicated
by key and kept in first-occurrence order. The hybrid merge with entity
recognition output lives here too.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

from .core import (
    HASH_LENGTHS,
    EntitySpan,
    Indicator,
    IndicatorType,
    ValidationError,
    indicator_key,
    validate_indicator,
)

log = logging.getLogger(__name__)

# Ordered rewrite rules; applying the full set twice equals applying it once.
DEFAULT_DEFANG_RULES: tuple[tuple[str, str], ...] = (
    (r"\[\.\]", "."),
    (r"\(\.\)", "."),
    (r"\[dot\]", "."),
    (r"\(dot\)", "."),
    (r"hxxps", "https"),
    (r"hxxp", "http"),
    (r"\[:\]", ":"),
    (r"\[at\]", "@"),
    (r"\(at\)", "@"),
)


@dataclass(frozen=True)
class DefangGrammar:
    """Ordered pattern -> replacement rewrites used to refang text."""

    rules: tuple[tuple[str, str], ...] = DEFAULT_DEFANG_RULES
    _compiled: tuple = field(init=False, repr=False, compare=False, default=())

    def __post_init__(self):
        compiled = tuple((re.compile(p, re.IGNORECASE), r) for p, r in self.rules)
        object.__setattr__(self, "_compiled", compiled)

    def apply(self, text: str) -> str:
        for pattern, replacement in self._compiled:
            text = pattern.sub(replacement, text)
        return text

    @classmethod
    def load(cls, path: str) -> "DefangGrammar":
        """Load an override rule file: one `pattern<TAB>replacement` per line,
        '#' comments and blank lines ignored."""
        rules = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                pattern, _, replacement = line.partition("\t")
                rules.append((pattern, replacement))
        return cls(rules=tuple(rules))


_DEFAULT_GRAMMAR = DefangGrammar()


def refang(text: str, grammar: Optional[DefangGrammar] = None) -> str:
    """Rewrite all defang tokens back to their original form."""
    return (grammar or _DEFAULT_GRAMMAR).apply(text)


def _load_tld_allowlist() -> frozenset[str]:
    raw = resources.files("tstem.data").joinpath("tlds.txt").read_text(encoding="utf-8")
    return frozenset(
        line.strip().lower()
        for line in raw.splitlines()
        if line.strip() and not line.startswith("#")
    )


TLD_ALLOWLIST = _load_tld_allowlist()

# Trailing characters that are sentence punctuation, not part of a URL.
_URL_TRAILING = ".,;:!?\"'>)]}"

# Guards make a match behave like a whitespace/punctuation-delimited token:
# it may not butt up against word chars or email/percent/plus/hyphen atoms,
# nor continue past a dot into more token characters (a single sentence-final
# dot is fine).
_BEHIND = r"(?<![\w.@%+-])"
_AHEAD = r"(?![\w@%+-])(?!\.[\w.@%+-])"

_URL_RE = re.compile(r"\b(?:https?|ftps?)://[^\s<>\"']+", re.IGNORECASE)
_EMAIL_RE = re.compile(_BEHIND + r"[A-Za-z0-9._%+-]+@(?:[A-Za-z0-9-]+\.)+[A-Za-z]{2,}" + _AHEAD)
_IPV4_RE = re.compile(_BEHIND + r"(?:\d{1,3}\.){3}\d{1,3}" + _AHEAD)
_IPV6_RE = re.compile(r"(?<![\w:.])[0-9A-Fa-f:]*:[0-9A-Fa-f:]+(?:\.\d{1,3}){0,3}(?![\w:])(?!\.[\w:.])")
_HASH_RE = re.compile(_BEHIND + r"[0-9A-Fa-f]{32,64}" + _AHEAD)
_CVE_RE = re.compile(_BEHIND + r"[Cc][Vv][Ee]-\d{4}-\d{4,}" + _AHEAD)
_DOMAIN_RE = re.compile(
    _BEHIND + r"(?:[A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?\.)+[A-Za-z]{2,}" + _AHEAD
)

_PRIVATE_IPV4_PREFIXES = ("10.", "192.168.", "127.", "169.254.", "0.")


def is_routable_ipv4(value: str) -> bool:
    """Private/reserved IPv4 ranges are extracted but flagged non-routable."""
    if value.startswith(_PRIVATE_IPV4_PREFIXES):
        return False
    if value.startswith("172."):
        second = int(value.split(".")[1])
        return not 16 <= second <= 31
    return True


def domain_is_extractable(value: str) -> bool:
    """Syntactic validity plus the bundled public-suffix-style allowlist."""
    if validate_indicator(value, IndicatorType.DOMAIN):
        return False
    return value.rsplit(".", 1)[-1].lower() in TLD_ALLOWLIST


# Precedence for ambiguous non-hash tokens.
_CLASSIFY_ORDER = (
    IndicatorType.URL,
    IndicatorType.EMAIL,
    IndicatorType.IPV4,
    IndicatorType.IPV6,
    IndicatorType.CVE,
    IndicatorType.DOMAIN,
)


def classify_token(token: str) -> Optional[IndicatorType]:
    """Resolve a refanged token to its unique indicator kind, or None.

    Hex strings resolve by length alone; other kinds are tried in the
    fixed precedence url > email > ipv4 > ipv6 > cve > domain.
    """
    if not token:
        return None
    if re.fullmatch(r"[0-9A-Fa-f]+", token) and len(token) in HASH_LENGTHS:
        return HASH_LENGTHS[len(token)]
    matched = []
    for kind in _CLASSIFY_ORDER:
        if kind is IndicatorType.DOMAIN:
            if domain_is_extractable(token):
                matched.append(kind)
        elif not validate_indicator(token, kind):
            matched.append(kind)
    if not matched:
        return None
    if len(matched) > 1:
        log.debug("token %r matched %s; using precedence %s",
                  token, [k.value for k in matched], matched[0].value)
    return matched[0]


def _overlaps(start: int, end: int, spans: list[tuple[int, int]]) -> bool:
    return any(start < e and s < end for s, e in spans)


def scan_candidates(text: str) -> list[tuple[int, str, IndicatorType]]:
    """Scan refanged text, returning (position, value, kind) candidates with
    overlap suppression (no domain inside a URL, no hash inside an email...)."""
    consumed: list[tuple[int, int]] = []
    out: list[tuple[int, str, IndicatorType]] = []

    for match in _URL_RE.finditer(text):
        value = match.group().rstrip(_URL_TRAILING)
        if value and not validate_indicator(value, IndicatorType.URL):
            consumed.append((match.start(), match.start() + len(value)))
            out.append((match.start(), value, IndicatorType.URL))

    scans = (
        (_EMAIL_RE, IndicatorType.EMAIL),
        (_IPV4_RE, IndicatorType.IPV4),
        (_IPV6_RE, IndicatorType.IPV6),
        (_HASH_RE, None),  # hash subtype resolved by hex length
        (_CVE_RE, IndicatorType.CVE),
        (_DOMAIN_RE, IndicatorType.DOMAIN),
    )
    for pattern, kind in scans:
        found: list[tuple[int, str, IndicatorType]] = []
        for match in pattern.finditer(text):
            start, end = match.start(), match.end()
            if _overlaps(start, end, consumed):
                continue
            value = match.group()
            if kind is None:
                actual = HASH_LENGTHS.get(len(value))
                if actual is not None:
                    found.append((start, value, actual))
            elif kind is IndicatorType.DOMAIN:
                if domain_is_extractable(value):
                    found.append((start, value, kind))
            elif not validate_indicator(value, kind):
                found.append((start, value, kind))
        out.extend(found)
        consumed.extend((pos, pos + len(value)) for pos, value, _ in found)
    return sorted(out, key=lambda c: c[0])


def extract_indicators(text: str, grammar: Optional[DefangGrammar] = None,
                       **indicator_fields) -> list[Indicator]:
    """Refang, scan, validate, dedup by key; first-occurrence order."""
    refanged = refang(text, grammar)
    seen: set[str] = set()
    result: list[Indicator] = []
    for _, value, kind in scan_candidates(refanged):
        try:
            key = indicator_key(value, kind)
        except ValidationError:
            continue
        if key in seen:
            continue
        seen.add(key)
        result.append(Indicator(value=value, kind=kind, **indicator_fields))
    return result


@dataclass
class MergeResult:
    """Outcome of combining rule-based output with entity recognition spans."""

    indicators: list[Indicator]
    context_tags: list[tuple[str, str]]
    invalid_dropped: int = 0


def merge_with_ner(rule_out: list[Indicator], spans: Iterable[EntitySpan],
                   text: str, grammar: Optional[DefangGrammar] = None) -> MergeResult:
    """Union semantics: rule output kept verbatim; Indicator-labeled spans are
    refanged, classified and added when new; other labels become context tags.
    Invalid Indicator spans are dropped and counted, never raised."""
    indicators = list(rule_out)
    seen = {ind.key for ind in indicators}
    context_tags: list[tuple[str, str]] = []
    dropped = 0
    for span in spans:
        if span.label != "Indicator":
            context_tags.append((span.label, span.text))
            continue
        value = refang(span.text, grammar).strip()
        kind = classify_token(value)
        if kind is None:
            dropped += 1
            continue
        try:
            key = indicator_key(value, kind)
        except ValidationError:
            dropped += 1
            continue
        if key in seen:
            continue
        seen.add(key)
        indicators.append(Indicator(value=value, kind=kind))
    return MergeResult(indicators=indicators, context_tags=context_tags,
                       invalid_dropped=dropped)
