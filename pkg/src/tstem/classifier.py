"""Two-granularity relevance classification.

Sentence-level scoring for short posts and chunk-and-aggregate scoring for
long pages, backed by a trainable hashed n-gram logistic baseline. A remote
scorer slot speaks the HTTP wire protocol so a transformer model server can
fill the same pipeline role.
"""

from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import requests

from .core import RelevanceVerdict

DEFAULT_DIM = 2 ** 18
DEFAULT_THRESHOLD = 0.5

_WORD_RE = re.compile(r"\w+", re.UNICODE)


class UntrainedModelError(RuntimeError):
    pass


class TransportError(RuntimeError):
    """Remote scorer unreachable or timed out."""


class ProtocolError(RuntimeError):
    """Remote scorer replied with a malformed response."""


def tokenize(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def _bucket(feature: str, dim: int) -> int:
    # crc32 is stable across processes, unlike the salted builtin hash
    return zlib.crc32(feature.encode("utf-8")) % dim


def hash_features(tokens: Sequence[str], dim: int, ngram_orders: tuple[int, ...] = (1, 2)) -> np.ndarray:
    """Hashed n-gram bucket indices (with repeats) for a token sequence."""
    idx = []
    if 1 in ngram_orders:
        idx.extend(_bucket(t, dim) for t in tokens)
    if 2 in ngram_orders:
        idx.extend(_bucket(tokens[i] + "\x1f" + tokens[i + 1], dim)
                   for i in range(len(tokens) - 1))
    return np.asarray(idx, dtype=np.int64)


@dataclass
class BaselineModel:
    """Hashed n-gram linear model with logistic output."""

    dim: int = DEFAULT_DIM
    ngram_orders: tuple[int, ...] = (1, 2)
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bias: float = 0.0
    model_id: str = "baseline-untrained"
    trained_on: Optional[dict] = None

    def __post_init__(self):
        if self.weights.size == 0:
            self.weights = np.zeros(self.dim, dtype=np.float64)
        if self.weights.shape != (self.dim,):
            raise ValueError(f"weight vector length {self.weights.shape} != dim {self.dim}")

    # -- persistence: versioned binary with a small header, then raw weights

    MAGIC = b"TSTM"
    VERSION = 1

    def save(self, path: str) -> None:
        orders = sum(1 << (o - 1) for o in self.ngram_orders)
        header = struct.pack("<4sHIId", self.MAGIC, self.VERSION, self.dim, orders, self.bias)
        meta = json.dumps({"model_id": self.model_id, "trained_on": self.trained_on}).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(struct.pack("<I", len(meta)))
            fh.write(meta)
            fh.write(self.weights.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "BaselineModel":
        with open(path, "rb") as fh:
            magic, version, dim, orders, bias = struct.unpack("<4sHIId", fh.read(22))
            if magic != cls.MAGIC:
                raise ValueError(f"{path}: not a baseline model file")
            if version != cls.VERSION:
                raise ValueError(f"{path}: unsupported model version {version}")
            (meta_len,) = struct.unpack("<I", fh.read(4))
            meta = json.loads(fh.read(meta_len).decode("utf-8"))
            weights = np.frombuffer(fh.read(dim * 8), dtype="<f8").copy()
        ngram_orders = tuple(o + 1 for o in range(8) if orders & (1 << o))
        return cls(dim=dim, ngram_orders=ngram_orders, weights=weights, bias=bias,
                   model_id=meta.get("model_id", "baseline"), trained_on=meta.get("trained_on"))


def score_text(model: BaselineModel, text: str) -> float:
    """Deterministic relevance probability in [0,1] for fixed model + text."""
    if model.weights is None:
        raise UntrainedModelError("model has no weights")
    idx = hash_features(tokenize(text), model.dim, model.ngram_orders)
    z = model.bias + (model.weights[idx].sum() if idx.size else 0.0)
    return float(1.0 / (1.0 + np.exp(-z)))


# ---------------------------------------------------------------------------
# sentence splitting

# Abbreviations that must not end a sentence.
_ABBREVIATIONS = {"e.g", "i.e", "etc", "vs", "mr", "mrs", "dr", "no", "vol", "approx"}

_TERMINAL_RE = re.compile(r"[.!?]+")


def split_sentences(text: str) -> list[tuple[str, int]]:
    """Split on ./!/? followed by whitespace then a capital or end of text,
    protecting URLs and common abbreviations; returns (sentence, offset)."""
    if not text.strip():
        return []
    protected: list[tuple[int, int]] = []
    for m in re.finditer(r"\b(?:https?|ftps?)://\S+", text, re.IGNORECASE):
        # the url's own trailing punctuation is sentence punctuation
        span = m.group().rstrip(".,;:!?\"')]}")
        protected.append((m.start(), m.start() + len(span)))
    breaks = [0]
    for m in _TERMINAL_RE.finditer(text):
        end = m.end()
        if any(s < end <= e for s, e in protected):
            continue
        tail = text[end:]
        if tail and not tail[:1].isspace():
            continue
        nxt = tail.lstrip()
        if nxt and not (nxt[0].isupper() or nxt[0].isdigit()):
            continue
        word = text[:m.start()].rsplit(None, 1)[-1].lower() if text[:m.start()].strip() else ""
        if word.rstrip(".") in _ABBREVIATIONS or word in _ABBREVIATIONS:
            continue
        breaks.append(end)
    breaks.append(len(text))
    out = []
    for start, end in zip(breaks, breaks[1:]):
        chunk = text[start:end]
        stripped = chunk.strip()
        if stripped:
            offset = start + (len(chunk) - len(chunk.lstrip()))
            out.append((stripped, offset))
    return out


# ---------------------------------------------------------------------------
# page chunking

@dataclass(frozen=True)
class ChunkingPolicy:
    """Sliding-window policy for scoring texts longer than one model input."""

    window: int = 512
    stride: int = 256
    aggregation: str = "max"  # max | mean

    def __post_init__(self):
        if not 0 < self.stride <= self.window:
            raise ValueError(f"need 0 < stride <= window, got {self.stride}/{self.window}")
        if self.aggregation not in ("max", "mean"):
            raise ValueError(f"aggregation must be max or mean, got {self.aggregation!r}")


DEFAULT_POLICY = ChunkingPolicy()


def iter_windows(tokens: Sequence[str], policy: ChunkingPolicy) -> list[Sequence[str]]:
    if len(tokens) <= policy.window:
        return [tokens]
    windows = []
    start = 0
    while True:
        windows.append(tokens[start:start + policy.window])
        if start + policy.window >= len(tokens):
            break
        start += policy.stride
    return windows


def score_page(model: BaselineModel, text: str,
               policy: ChunkingPolicy = DEFAULT_POLICY,
               threshold: float = DEFAULT_THRESHOLD) -> RelevanceVerdict:
    """Window the token stream, score each window, aggregate to one verdict."""
    tokens = tokenize(text)
    scores = []
    for window in iter_windows(tokens, policy):
        idx = hash_features(window, model.dim, model.ngram_orders)
        z = model.bias + (model.weights[idx].sum() if idx.size else 0.0)
        scores.append(float(1.0 / (1.0 + np.exp(-z))))
    agg = max(scores) if policy.aggregation == "max" else sum(scores) / len(scores)
    return RelevanceVerdict.from_score(agg, threshold, "page", model.model_id)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    dim: int = DEFAULT_DIM
    epochs: int = 5
    learning_rate: float = 0.5
    seed: int = 0
    ngram_orders: tuple[int, ...] = (1, 2)


def train_baseline(corpus: Sequence[tuple[str, bool]], config: TrainConfig = TrainConfig(),
                   validation: Optional[Sequence[tuple[str, bool]]] = None,
                   threshold: float = DEFAULT_THRESHOLD):
    """Averaged online logistic gradient descent; bit-deterministic per seed.

    Returns (model, EvalReport | None): the report is computed on the
    validation split when one is supplied.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    labels = {label for _, label in corpus}
    if len(labels) < 2:
        raise ValueError("corpus must contain both labels")

    featurized = [(hash_features(tokenize(text), config.dim, config.ngram_orders), 1.0 if label else 0.0)
                  for text, label in corpus]
    rng = np.random.default_rng(config.seed)
    w = np.zeros(config.dim, dtype=np.float64)
    b = 0.0
    w_sum = np.zeros_like(w)
    b_sum = 0.0
    steps = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(featurized))
        for i in order:
            idx, y = featurized[i]
            z = b + (w[idx].sum() if idx.size else 0.0)
            p = 1.0 / (1.0 + np.exp(-z))
            grad = p - y
            if idx.size:
                np.subtract.at(w, idx, config.learning_rate * grad)
            b -= config.learning_rate * grad
            w_sum += w
            b_sum += b
            steps += 1
    model = BaselineModel(
        dim=config.dim,
        ngram_orders=config.ngram_orders,
        weights=w_sum / steps,
        bias=b_sum / steps,
        model_id=f"baseline-d{config.dim}-s{config.seed}",
        trained_on={"examples": len(corpus), "epochs": config.epochs, "seed": config.seed},
    )
    report = None
    if validation is not None:
        preds = [score_text(model, text) >= threshold for text, _ in validation]
        report = evaluate(preds, [label for _, label in validation])
    return model, report


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class LabelMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float


@dataclass(frozen=True)
class EvalReport:
    """Confusion counts plus the metrics derived from them.

    All metrics are reproducible from the counts: precision = TP/(TP+FP),
    recall = TP/(TP+FN), F1 the harmonic mean, accuracy = (TP+TN)/total.
    """

    tp: int
    fp: int
    fn: int
    tn: int
    per_label: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    def to_json_dict(self) -> dict:
        return {
            "confusion": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn},
            "accuracy": self.accuracy,
            "per_label": {
                name: {"precision": m.precision, "recall": m.recall,
                       "f1": m.f1, "accuracy": m.accuracy}
                for name, m in self.per_label.items()
            },
        }


def _metrics(tp: int, fp: int, fn: int, tn: int) -> LabelMetrics:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    total = tp + fp + fn + tn
    return LabelMetrics(precision=precision, recall=recall, f1=f1,
                        accuracy=(tp + tn) / total if total else 0.0)


def evaluate(predictions: Sequence[bool], gold: Sequence[bool]) -> EvalReport:
    if len(predictions) != len(gold):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(gold)} gold")
    tp = sum(1 for p, g in zip(predictions, gold) if p and g)
    fp = sum(1 for p, g in zip(predictions, gold) if p and not g)
    fn = sum(1 for p, g in zip(predictions, gold) if not p and g)
    tn = sum(1 for p, g in zip(predictions, gold) if not p and not g)
    per_label = {
        "relevant": _metrics(tp, fp, fn, tn),
        # for the negative label the confusion matrix is transposed
        "non_relevant": _metrics(tn, fn, fp, tp),
    }
    return EvalReport(tp=tp, fp=fp, fn=fn, tn=tn, per_label=per_label)


# ---------------------------------------------------------------------------
# remote scorer protocol

def remote_score(endpoint: str, text: str, granularity: str,
                 threshold: float = DEFAULT_THRESHOLD, timeout: float = 10.0,
                 session: Optional[requests.Session] = None) -> RelevanceVerdict:
    """POST /v1/classify {"text", "granularity"} -> {"score", "model_id"}."""
    if granularity not in ("sentence", "page"):
        raise ValueError(f"granularity must be sentence or page, got {granularity!r}")
    url = endpoint.rstrip("/") + "/v1/classify"
    try:
        resp = (session or requests).post(
            url, json={"text": text, "granularity": granularity}, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"classify request to {url} failed: {exc}") from exc
    if not 200 <= resp.status_code < 300:
        raise ProtocolError(f"classify request returned HTTP {resp.status_code}")
    try:
        body = resp.json()
    except ValueError as exc:
        raise ProtocolError(f"non-JSON classify response: {exc}") from exc
    if "score" not in body:
        raise ProtocolError('classify response missing "score"')
    score = body["score"]
    if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
        raise ProtocolError(f'classify response "score" out of range: {score!r}')
    return RelevanceVerdict.from_score(
        float(score), threshold, granularity, str(body.get("model_id", "remote")))
