"""Training-corpus loaders with precise error reporting.

Classification corpus: NDJSON, one object per line with a string "text" and
a boolean "relevant". Tagging corpus: NDJSON with parallel "tokens" and
"tags" string lists using B-/I-/O tags over the five entity labels.
"""

from __future__ import annotations

import json

ENTITY_LABELS = ("Malware", "Indicator", "System", "Organization", "Vulnerability")
IOB_TAGS = ("O",) + tuple(f"{prefix}-{label}"
                          for label in ENTITY_LABELS for prefix in ("B", "I"))
TAG_TO_ID = {tag: i for i, tag in enumerate(IOB_TAGS)}


class CorpusFormatError(ValueError):
    """Names the file and the first offending line."""

    def __init__(self, path: str, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def _lines(path: str):
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CorpusFormatError(path, 0, f"cannot open corpus: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield lineno, line


def _parse(path: str, lineno: int, line: str) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(path, lineno, f"invalid JSON: {exc}") from exc
    if not isinstance(record, dict):
        raise CorpusFormatError(path, lineno, "line must be a JSON object")
    return record


def load_classify_corpus(path: str) -> list[tuple[str, bool]]:
    corpus = []
    for lineno, line in _lines(path):
        record = _parse(path, lineno, line)
        if not isinstance(record.get("text"), str):
            raise CorpusFormatError(path, lineno, 'missing string field "text"')
        if not isinstance(record.get("relevant"), bool):
            raise CorpusFormatError(path, lineno, 'missing boolean field "relevant"')
        corpus.append((record["text"], record["relevant"]))
    if not corpus:
        raise CorpusFormatError(path, 0, "corpus is empty")
    return corpus


def load_ner_corpus(path: str) -> list[tuple[list[str], list[str]]]:
    corpus = []
    for lineno, line in _lines(path):
        record = _parse(path, lineno, line)
        tokens, tags = record.get("tokens"), record.get("tags")
        if (not isinstance(tokens, list)
                or not all(isinstance(t, str) and t for t in tokens)):
            raise CorpusFormatError(path, lineno,
                                    'missing list-of-strings field "tokens"')
        if not isinstance(tags, list) or len(tags) != len(tokens):
            raise CorpusFormatError(path, lineno,
                                    '"tags" must be a list matching "tokens" in length')
        bad = [t for t in tags if t not in TAG_TO_ID]
        if bad:
            raise CorpusFormatError(path, lineno, f"unknown tag {bad[0]!r}")
        corpus.append((tokens, tags))
    if not corpus:
        raise CorpusFormatError(path, 0, "corpus is empty")
    return corpus
