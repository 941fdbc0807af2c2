"""Shared fixtures: an in-process programmable HTTP stub, a broker on tmp
storage, and synthetic corpora."""

from __future__ import annotations

import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from tstem.bus import Broker


class StubServer:
    """Programmable HTTP server: route (method, path-prefix) -> callable
    taking (handler, body bytes) and returning (status, json-able body).
    Records every request for assertions."""

    def __init__(self):
        self.routes = {}
        self.requests: list[tuple[str, str, bytes]] = []
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def _serve(self, method):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                with stub._lock:
                    stub.requests.append((method, self.path, body))
                for (m, prefix), fn in stub.routes.items():
                    if m == method and self.path.startswith(prefix):
                        status, payload = fn(self, body)
                        raw = (payload if isinstance(payload, bytes)
                               else json.dumps(payload).encode("utf-8"))
                        self.send_response(status)
                        self.send_header("Content-Type", "application/json")
                        self.send_header("Content-Length", str(len(raw)))
                        self.end_headers()
                        self.wfile.write(raw)
                        return
                self.send_error(404)

            def do_GET(self):
                self._serve("GET")

            def do_POST(self):
                self._serve("POST")

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self._server.server_port}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def stub_server():
    server = StubServer()
    yield server
    server.stop()


@pytest.fixture
def broker(tmp_path):
    b = Broker(str(tmp_path / "bus"))
    yield b
    b.close()


POSITIVE_LEXICON = ["malware", "botnet", "ransomware", "c2", "exploit",
                    "phishing", "trojan", "payload", "infostealer", "backdoor"]
NEGATIVE_LEXICON = ["recipe", "garden", "football", "holiday", "painting",
                    "concert", "puppy", "picnic", "novel", "sunset"]


def make_separable_corpus(n: int = 200, seed: int = 0) -> list[tuple[str, bool]]:
    """Synthetic corpus linearly separable by construction: positives draw
    words only from one lexicon, negatives only from a disjoint one."""
    rng = random.Random(seed)
    corpus = []
    for i in range(n):
        positive = i % 2 == 0
        lexicon = POSITIVE_LEXICON if positive else NEGATIVE_LEXICON
        words = [rng.choice(lexicon) for _ in range(rng.randint(5, 15))]
        corpus.append((" ".join(words), positive))
    return corpus


@pytest.fixture
def separable_corpus():
    return make_separable_corpus()
