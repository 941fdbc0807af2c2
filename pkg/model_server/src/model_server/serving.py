"""HTTP service implementing the classify and entity-tagging wire protocols.

POST /v1/classify {"text", "granularity"} -> {"score", "model_id"}
POST /v1/ner      {"text"}                -> {"spans": [{label, start, end, text}]}
GET  /healthz                              -> {"status", "models"}

Models are loaded once at startup and shared read-only across requests;
malformed request bodies get a 400 with a JSON error, never a crash.
"""

from __future__ import annotations

import json
import os
import threading
from typing import Optional

import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from transformers import (BertForSequenceClassification,
                          BertForTokenClassification)

from .data import IOB_TAGS
from .vocab import Vocab, word_tokenize


class ModelLoadError(RuntimeError):
    pass


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise ModelLoadError(f"model artifact not found at {path}")
    return path


def _load_meta(model_dir: str, task: str) -> dict:
    _require(model_dir)
    meta_path = _require(os.path.join(model_dir, "meta.json"))
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("task") != task:
        raise ModelLoadError(
            f"{model_dir} holds a {meta.get('task')!r} artifact, expected {task!r}")
    return meta


class ClassifierBundle:
    def __init__(self, model_dir: str):
        self.meta = _load_meta(model_dir, "classify")
        self.vocab = Vocab.load(_require(os.path.join(model_dir, "vocab.json")))
        self.model = BertForSequenceClassification.from_pretrained(model_dir)
        self.model.eval()
        self.model_id = self.meta["model_id"]
        self.max_len = int(self.meta["max_len"])
        self._lock = threading.Lock()

    def score(self, text: str) -> float:
        tokens = [t for t, _, _ in word_tokenize(text)]
        ids = ([self.vocab.cls_id] + self.vocab.encode(tokens)[:self.max_len - 2]
               + [self.vocab.sep_id])
        batch = torch.tensor([ids], dtype=torch.long)
        with self._lock, torch.no_grad():
            logits = self.model(input_ids=batch).logits
        return torch.softmax(logits, dim=-1)[0, 1].item()


class TaggerBundle:
    def __init__(self, model_dir: str):
        self.meta = _load_meta(model_dir, "ner")
        self.vocab = Vocab.load(_require(os.path.join(model_dir, "vocab.json")))
        self.model = BertForTokenClassification.from_pretrained(model_dir)
        self.model.eval()
        self.model_id = self.meta["model_id"]
        self.max_len = int(self.meta["max_len"])
        self.tags = tuple(self.meta.get("labels", IOB_TAGS))
        self._lock = threading.Lock()

    def tag(self, text: str) -> list[dict]:
        tokens = word_tokenize(text)[:self.max_len - 2]
        if not tokens:
            return []
        ids = ([self.vocab.cls_id]
               + self.vocab.encode([t for t, _, _ in tokens])
               + [self.vocab.sep_id])
        batch = torch.tensor([ids], dtype=torch.long)
        with self._lock, torch.no_grad():
            logits = self.model(input_ids=batch).logits
        predicted = logits.argmax(dim=-1)[0, 1:1 + len(tokens)].tolist()
        return self._decode([self.tags[i] for i in predicted], tokens, text)

    @staticmethod
    def _decode(tags: list[str], tokens: list[tuple[str, int, int]],
                text: str) -> list[dict]:
        """B-/I-/O runs to character spans; a dangling I- opens a new span."""
        spans = []
        current: Optional[dict] = None
        for tag, (_, start, end) in zip(tags, tokens):
            if tag == "O":
                current = None
                continue
            prefix, _, label = tag.partition("-")
            if prefix == "I" and current is not None and current["label"] == label:
                current["end"] = end
            else:
                current = {"label": label, "start": start, "end": end}
                spans.append(current)
        for span in spans:
            span["text"] = text[span["start"]:span["end"]]
        return spans


async def _json_body(request: Request) -> Optional[dict]:
    try:
        body = await request.json()
    except Exception:
        return None
    return body if isinstance(body, dict) else None


def _bad_request(message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=400)


def create_app(classifier_dir: str, ner_dir: str) -> FastAPI:
    """Load both artifacts (startup fails loudly if either is missing) and
    expose the wire protocol."""
    classifier = ClassifierBundle(classifier_dir)
    tagger = TaggerBundle(ner_dir)
    app = FastAPI(title="tstem model server")

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "models": {"classify": classifier.model_id,
                                           "ner": tagger.model_id}}

    @app.post("/v1/classify")
    async def classify(request: Request):
        body = await _json_body(request)
        if body is None:
            return _bad_request("request body must be a JSON object")
        text = body.get("text")
        granularity = body.get("granularity")
        if not isinstance(text, str):
            return _bad_request('"text" must be a string')
        if granularity not in ("sentence", "page"):
            return _bad_request('"granularity" must be "sentence" or "page"')
        return {"score": classifier.score(text), "model_id": classifier.model_id}

    @app.post("/v1/ner")
    async def ner(request: Request):
        body = await _json_body(request)
        if body is None:
            return _bad_request("request body must be a JSON object")
        text = body.get("text")
        if not isinstance(text, str):
            return _bad_request('"text" must be a string')
        return {"spans": tagger.tag(text), "model_id": tagger.model_id}

    return app
