"""Word-level tokenizer and vocabulary.

Whitespace-delimited tokens with character offsets, so token-classification
predictions map back to exact character spans. The vocabulary is built from
the training corpus and stored with the model artifact.
"""

from __future__ import annotations

import json
import re
from collections import Counter

_TOKEN_RE = re.compile(r"\S+")

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)


def word_tokenize(text: str) -> list[tuple[str, int, int]]:
    """(token, start, end) triples; text[start:end] == token."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class Vocab:
    def __init__(self, token_to_id: dict[str, int]):
        for i, special in enumerate(SPECIALS):
            if token_to_id.get(special) != i:
                raise ValueError(f"vocab must map {special!r} to {i}")
        self.token_to_id = token_to_id

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    def encode(self, tokens: list[str]) -> list[int]:
        unk = self.token_to_id[UNK]
        return [self.token_to_id.get(t.lower(), unk) for t in tokens]

    @classmethod
    def build(cls, token_lists: list[list[str]], max_size: int = 20_000) -> "Vocab":
        counts = Counter(t.lower() for tokens in token_lists for t in tokens)
        table = {special: i for i, special in enumerate(SPECIALS)}
        for token, _ in counts.most_common(max_size - len(SPECIALS)):
            table[token] = len(table)
        return cls(table)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.token_to_id, fh, ensure_ascii=False)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))
