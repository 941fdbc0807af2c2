"""Entity tagging over the five-label scheme.

Remote transformer tagging via the wire protocol, a deterministic offline
fallback (gazetteer + patterns), and IOB decoding shared by both.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence

import requests

from .core import NER_LABELS, EntitySpan
from .classifier import ProtocolError, TransportError
from . import extractor

_VALID_TAGS = frozenset(
    {"O"} | {f"{prefix}-{label}" for prefix in ("B", "I") for label in NER_LABELS}
)

Token = tuple[str, int, int]  # (text, start, end)


@dataclass
class DecodeResult:
    spans: list[EntitySpan]
    repairs: int = 0  # orphan I- tags promoted to B-


def decode_iob(tokens: Sequence[Token], tags: Sequence[str], text: Optional[str] = None) -> DecodeResult:
    """Turn maximal B-then-I runs of one label into spans.

    Orphan I- tags (no preceding B/I of the same label) are repaired to B-
    and counted rather than rejected; remote models emit imperfect sequences
    and the pipeline must not halt.
    """
    if len(tokens) != len(tags):
        raise ValueError(f"{len(tokens)} tokens vs {len(tags)} tags")
    for tag in tags:
        if tag not in _VALID_TAGS:
            raise ValueError(f"unknown IOB tag {tag!r}")

    spans: list[EntitySpan] = []
    repairs = 0
    run_label: Optional[str] = None
    run_start_tok: int = -1

    def close_run(end_tok: int) -> None:
        if run_label is None:
            return
        start = tokens[run_start_tok][1]
        end = tokens[end_tok][2]
        span_text = text[start:end] if text is not None else " ".join(
            t[0] for t in tokens[run_start_tok:end_tok + 1])
        spans.append(EntitySpan(label=run_label, start=start, end=end, text=span_text))

    for i, tag in enumerate(tags):
        if tag == "O":
            close_run(i - 1)
            run_label = None
            continue
        prefix, _, label = tag.partition("-")
        if prefix == "I" and label == run_label:
            continue  # extend current run
        if prefix == "I":
            repairs += 1  # orphan I- treated as B-
        close_run(i - 1)
        run_label = label
        run_start_tok = i
    close_run(len(tags) - 1)
    return DecodeResult(spans=spans, repairs=repairs)


# ---------------------------------------------------------------------------
# remote tagging

@dataclass
class TagResult:
    spans: list[EntitySpan]
    dropped: int = 0  # spans whose offsets did not match the text


def tag_remote(endpoint: str, text: str, timeout: float = 10.0,
               session: Optional[requests.Session] = None) -> TagResult:
    """POST /v1/ner {"text"} -> {"spans": [{label, start, end}]}.

    Offsets are validated against the text; invalid spans are dropped with
    a counter, not raised.
    """
    url = endpoint.rstrip("/") + "/v1/ner"
    try:
        resp = (session or requests).post(url, json={"text": text}, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"ner request to {url} failed: {exc}") from exc
    if not 200 <= resp.status_code < 300:
        raise ProtocolError(f"ner request returned HTTP {resp.status_code}")
    try:
        body = resp.json()
    except ValueError as exc:
        raise ProtocolError(f"non-JSON ner response: {exc}") from exc
    if "spans" not in body or not isinstance(body["spans"], list):
        raise ProtocolError('ner response missing "spans" list')

    spans: list[EntitySpan] = []
    dropped = 0
    for raw in body["spans"]:
        try:
            span = EntitySpan(
                label=raw["label"], start=int(raw["start"]), end=int(raw["end"]),
                text=raw.get("text", text[int(raw["start"]):int(raw["end"])]),
            )
        except (KeyError, TypeError, ValueError):
            dropped += 1
            continue
        if not span.matches(text):
            dropped += 1
            continue
        spans.append(span)
    return TagResult(spans=spans, dropped=dropped)


# ---------------------------------------------------------------------------
# deterministic fallback

def _load_default_gazetteer() -> dict[str, list[str]]:
    raw = resources.files("tstem.data").joinpath("gazetteer.json").read_text(encoding="utf-8")
    return json.loads(raw)


_DEFAULT_GAZETTEER = _load_default_gazetteer()

_CVE_SPAN_RE = re.compile(r"\bCVE-\d{4}-\d{4,}\b", re.IGNORECASE)


def tag_fallback(text: str, gazetteer: Optional[dict[str, list[str]]] = None) -> list[EntitySpan]:
    """Gazetteer + pattern tagger: extractor patterns yield Indicator spans,
    wordlists yield Malware/System/Organization, CVE patterns Vulnerability.
    Deterministic; overlapping candidates resolve to the earliest, longest."""
    if gazetteer is None:
        gazetteer = _DEFAULT_GAZETTEER
    candidates: list[EntitySpan] = []

    # spans must slice the host text, so scan it as-is; defanged forms are
    # the rule-based extractor's job after refanging
    for pos, value, kind in extractor.scan_candidates(text):
        if kind is extractor.IndicatorType.CVE:
            continue  # tagged as Vulnerability below, per the label scheme
        candidates.append(EntitySpan(label="Indicator", start=pos,
                                     end=pos + len(value), text=value))

    for m in _CVE_SPAN_RE.finditer(text):
        candidates.append(EntitySpan(label="Vulnerability", start=m.start(),
                                     end=m.end(), text=m.group()))

    for label, terms in gazetteer.items():
        if label not in NER_LABELS:
            raise ValueError(f"gazetteer label {label!r} not in the five-label scheme")
        for term in terms:
            for m in re.finditer(r"(?<!\w)" + re.escape(term) + r"(?!\w)", text, re.IGNORECASE):
                candidates.append(EntitySpan(label=label, start=m.start(),
                                             end=m.end(), text=m.group()))

    # one tagging pass yields non-overlapping spans: earliest start wins,
    # longer span wins ties, CVE/Indicator already distinct by pattern
    candidates.sort(key=lambda s: (s.start, -(s.end - s.start)))
    chosen: list[EntitySpan] = []
    last_end = -1
    for span in candidates:
        if span.start >= last_end:
            chosen.append(span)
            last_end = span.end
    return chosen
