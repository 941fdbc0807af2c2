"""Indexing terminal of the pipeline.

A local NDJSON archive is the durability source of truth; a client speaking
the Elasticsearch-compatible bulk REST protocol mirrors records out on a
best-effort basis with bounded retry.
"""

from __future__ import annotations

import json
import os
import threading
from collections import deque
from dataclasses import dataclass
from typing import Optional, Union

import requests

from .core import Document, Indicator


class SinkError(Exception):
    pass


Record = Union[Document, Indicator]


def _record_id(record: Record) -> str:
    return record.id if isinstance(record, Document) else record.key


def _record_dict(record: Record) -> dict:
    d = record.to_json_dict()
    if isinstance(record, Indicator):
        d["id"] = record.key
    return d


def format_bulk_body(docs: list[dict], index_name: str) -> bytes:
    """Bulk API body: one action line then one source line per doc,
    newline-terminated, UTF-8."""
    if not docs:
        raise SinkError("bulk body requires at least one document")
    lines = []
    for doc in docs:
        lines.append(json.dumps({"index": {"_index": index_name, "_id": doc["id"]}},
                                separators=(",", ":")))
        lines.append(json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
    return ("\n".join(lines) + "\n").encode("utf-8")


@dataclass(frozen=True)
class RemoteSinkConfig:
    base_url: str
    index_prefix: str = "tstem"
    batch_size: int = 50
    retry_queue_cap: int = 1000
    timeout_seconds: float = 10.0


class Sink:
    """Append-to-archive with ack after local durability; remote bulk
    indexing is queued and flushed in batches."""

    def __init__(self, archive_path: str, remote: Optional[RemoteSinkConfig] = None,
                 session: Optional[requests.Session] = None, fsync: bool = True):
        self.archive_path = archive_path
        self.remote = remote
        self.fsync = fsync
        self._session = session or requests.Session()
        self._lock = threading.Lock()
        os.makedirs(os.path.dirname(os.path.abspath(archive_path)), exist_ok=True)
        self._fh = open(archive_path, "a", encoding="utf-8")
        self._pending: deque[tuple[str, dict]] = deque()  # (index name, doc)
        self._retry: deque[tuple[str, list[dict]]] = deque()
        self.acked = 0
        self.remote_indexed = 0
        self.remote_failures = 0
        self.retry_dropped = 0
        self._seen_ids: set[str] = set()

    def _index_name(self, record: Record) -> str:
        suffix = "docs" if isinstance(record, Document) else "iocs"
        prefix = self.remote.index_prefix if self.remote else "tstem"
        return f"{prefix}-{suffix}"

    def index_record(self, record: Record) -> str:
        """Append to the NDJSON archive (the ack point) and enqueue for bulk
        flush when a remote sink is configured. Returns the record id."""
        try:
            doc = _record_dict(record)
            line = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        except (TypeError, ValueError) as exc:
            raise SinkError(f"record {_record_id(record)} failed to serialize: {exc}") from exc
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            self.acked += 1
            self._seen_ids.add(doc["id"])
            if self.remote is not None:
                self._pending.append((self._index_name(record), doc))
        if self.remote is not None:
            self._flush_ready()
        return doc["id"]

    def contains(self, record_id: str) -> bool:
        with self._lock:
            return record_id in self._seen_ids

    # -- remote side

    def _flush_ready(self) -> None:
        while True:
            with self._lock:
                if len(self._pending) < self.remote.batch_size:
                    return
                batch = [self._pending.popleft() for _ in range(self.remote.batch_size)]
            self._send(batch)

    def flush_remote(self) -> None:
        """Push everything pending plus the retry queue."""
        if self.remote is None:
            return
        with self._lock:
            batch = list(self._pending)
            self._pending.clear()
            retries = list(self._retry)
            self._retry.clear()
        if batch:
            self._send(batch)
        for index_name, docs in retries:
            self._send([(index_name, d) for d in docs])

    def _send(self, batch: list[tuple[str, dict]]) -> None:
        by_index: dict[str, list[dict]] = {}
        for index_name, doc in batch:
            by_index.setdefault(index_name, []).append(doc)
        for index_name, docs in by_index.items():
            body = format_bulk_body(docs, index_name)
            try:
                resp = self._session.post(
                    self.remote.base_url.rstrip("/") + "/_bulk", data=body,
                    headers={"Content-Type": "application/x-ndjson"},
                    timeout=self.remote.timeout_seconds)
                ok = 200 <= resp.status_code < 300
            except requests.RequestException:
                ok = False
            if ok:
                self.remote_indexed += len(docs)
            else:
                self.remote_failures += 1
                with self._lock:
                    self._retry.append((index_name, docs))
                    while len(self._retry) > self.remote.retry_queue_cap:
                        self._retry.popleft()
                        self.retry_dropped += 1

    def retry_queue_size(self) -> int:
        with self._lock:
            return len(self._retry)

    def close(self) -> None:
        with self._lock:
            self._fh.close()


def replay_archive(path: str) -> list[dict]:
    """Re-read the NDJSON archive: exactly the acked records, in ack order."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
