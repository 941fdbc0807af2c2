"""Fixtures: smoke-trained artifacts (session-scoped, CPU) and a live
uvicorn instance of the service on a free port."""

from __future__ import annotations

import socket
import sys
import threading
import time
from pathlib import Path

import pytest
import uvicorn

# resolve the pipeline repository root so its reusable wire-contract checks
# (tests.wire_contract) import cleanly
sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from corpus_fixtures import write_classify_corpus, write_ner_corpus
from model_server.train import TrainSettings, finetune_classifier, finetune_ner


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("artifacts")
    settings = TrainSettings(smoke=True)
    classify_meta = finetune_classifier(
        write_classify_corpus(root / "classify.ndjson"),
        str(root / "classifier"), settings)
    ner_meta = finetune_ner(
        write_ner_corpus(root / "ner.ndjson"), str(root / "tagger"), settings)
    return {"classifier_dir": str(root / "classifier"),
            "ner_dir": str(root / "tagger"),
            "classify_meta": classify_meta, "ner_meta": ner_meta}


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="session")
def live_server(artifacts):
    from model_server.serving import create_app

    app = create_app(artifacts["classifier_dir"], artifacts["ner_dir"])
    port = _free_port()
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 15
    while not server.started and time.monotonic() < deadline:
        time.sleep(0.05)
    assert server.started, "service failed to start"
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(5)
