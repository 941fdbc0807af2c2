"""In-process Kafka-role decoupling layer.

Durable topic logs with producer/consumer groups, committed offsets and
at-least-once delivery between pipeline stages. One logical partition per
topic keeps ordering simple; an external broker can be swapped in behind
the same surface.

Log file byte layout (documented contract):

    header:  magic "TLOG" (4 bytes) | version u16 LE
    record:  payload length u32 LE | crc32(payload) u32 LE
             | produced_at f64 LE (unix seconds) | payload bytes

Offsets are implicit: the n-th record in the file has offset n. The index
is rebuilt by scanning on startup; a torn tail (partial record or bad CRC)
is truncated, which makes crash recovery testable.
"""

from __future__ import annotations

import json
import os
import re
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Optional

MAGIC = b"TLOG"
VERSION = 1
_HEADER = struct.pack("<4sH", MAGIC, VERSION)
_REC_HEAD = struct.Struct("<IId")

DEFAULT_TOPICS = ("web.raw", "tweet.raw", "doc.relevant", "ioc.extracted")


class BusError(Exception):
    pass


class UnknownGroupError(BusError):
    pass


class BusyGroupError(BusError):
    """A second concurrent poller hit a group that allows only one."""


@dataclass(frozen=True)
class TopicRecord:
    topic: str
    offset: int
    payload: bytes
    produced_at: float

    def json(self) -> dict:
        return json.loads(self.payload.decode("utf-8"))


def _safe_name(topic: str) -> str:
    if not re.fullmatch(r"[A-Za-z0-9._-]+", topic):
        raise BusError(f"invalid topic name {topic!r}")
    return topic


class _TopicLog:
    """One append-only log file plus its in-memory offset index."""

    def __init__(self, path: str, durability: str):
        self.path = path
        self.durability = durability
        self.positions: list[int] = []  # byte position of each record
        self.produced: list[float] = []
        self._recover()
        self._fh = open(path, "ab")

    def _recover(self) -> None:
        if not os.path.exists(self.path):
            with open(self.path, "wb") as fh:
                fh.write(_HEADER)
            return
        with open(self.path, "rb") as fh:
            header = fh.read(len(_HEADER))
            if header[:4] != MAGIC:
                raise BusError(f"{self.path}: not a topic log")
            pos = fh.tell()
            good_end = pos
            while True:
                head = fh.read(_REC_HEAD.size)
                if len(head) < _REC_HEAD.size:
                    break
                length, crc, produced_at = _REC_HEAD.unpack(head)
                payload = fh.read(length)
                if len(payload) < length or zlib.crc32(payload) != crc:
                    break  # torn tail
                self.positions.append(pos)
                self.produced.append(produced_at)
                pos = fh.tell()
                good_end = pos
        size = os.path.getsize(self.path)
        if size > good_end:
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)

    def append(self, payload: bytes, produced_at: float) -> int:
        pos = self._fh.tell()
        self._fh.write(_REC_HEAD.pack(len(payload), zlib.crc32(payload), produced_at))
        self._fh.write(payload)
        self._fh.flush()
        if self.durability == "sync":
            os.fsync(self._fh.fileno())
        self.positions.append(pos)
        self.produced.append(produced_at)
        return len(self.positions) - 1

    def read(self, offset: int, topic: str) -> TopicRecord:
        with open(self.path, "rb") as fh:
            fh.seek(self.positions[offset])
            length, crc, produced_at = _REC_HEAD.unpack(fh.read(_REC_HEAD.size))
            payload = fh.read(length)
        if zlib.crc32(payload) != crc:
            raise BusError(f"{topic}@{offset}: CRC mismatch")
        return TopicRecord(topic=topic, offset=offset, payload=payload,
                           produced_at=produced_at)

    @property
    def head(self) -> int:
        """Offset of the newest record, -1 when empty."""
        return len(self.positions) - 1

    def close(self) -> None:
        self._fh.close()


class Broker:
    """Durable topics with consumer groups; safe for many concurrent
    producers and groups, one active poller per group."""

    def __init__(self, root_dir: str, *, max_record_bytes: int = 1 << 20,
                 durability: str = "sync", max_backlog: Optional[int] = None):
        if durability not in ("sync", "lazy"):
            raise ValueError(f"durability must be sync or lazy, got {durability!r}")
        self.root_dir = root_dir
        self.max_record_bytes = max_record_bytes
        self.durability = durability
        self.max_backlog = max_backlog
        os.makedirs(root_dir, exist_ok=True)
        self._lock = threading.Lock()
        self._space = threading.Condition(self._lock)
        self._topics: dict[str, _TopicLog] = {}
        # group id -> (topic, next offset to read)
        self._groups: dict[str, tuple[str, int]] = {}
        self._pollers: dict[str, threading.Lock] = {}
        self._load_groups()

    # -- persistence of group offsets

    def _groups_path(self) -> str:
        return os.path.join(self.root_dir, "groups.json")

    def _load_groups(self) -> None:
        path = self._groups_path()
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
            self._groups = {g: (t, int(n)) for g, (t, n) in raw.items()}
            self._pollers = {g: threading.Lock() for g in self._groups}

    def _save_groups(self) -> None:
        tmp = self._groups_path() + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({g: list(v) for g, v in self._groups.items()}, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._groups_path())

    # -- topics

    def _topic(self, name: str) -> _TopicLog:
        log = self._topics.get(name)
        if log is None:
            path = os.path.join(self.root_dir, _safe_name(name) + ".log")
            log = _TopicLog(path, self.durability)
            self._topics[name] = log
        return log

    def head(self, topic: str) -> int:
        with self._lock:
            return self._topic(topic).head

    def _backlog(self, topic: str) -> int:
        log = self._topics[topic]
        positions = [pos for t, pos in self._groups.values() if t == topic]
        if not positions:
            return 0
        return (log.head + 1) - min(positions)

    # -- producer side

    def publish(self, topic: str, payload: bytes) -> int:
        """Append to the topic log (created on first use); durable before
        return in sync mode; blocks while the bounded backlog is full."""
        if len(payload) > self.max_record_bytes:
            raise BusError(f"payload of {len(payload)} bytes exceeds "
                           f"max record size {self.max_record_bytes}")
        with self._space:
            log = self._topic(topic)
            if self.max_backlog is not None:
                while self._backlog(topic) >= self.max_backlog:
                    self._space.wait()
            return log.append(payload, time.time())

    # -- consumer side

    def register_group(self, group: str, topic: str) -> None:
        with self._lock:
            if group in self._groups:
                existing_topic, _ = self._groups[group]
                if existing_topic != topic:
                    raise BusError(f"group {group!r} already bound to {existing_topic!r}")
                return
            self._topic(topic)
            self._groups[group] = (topic, 0)
            self._pollers[group] = threading.Lock()
            self._save_groups()

    def poll(self, group: str, max_batch: int = 100) -> list[TopicRecord]:
        """Records from the committed position onward, in order; the
        committed position does not advance (at-least-once redelivery)."""
        with self._lock:
            if group not in self._groups:
                raise UnknownGroupError(f"unknown group {group!r}")
            poller = self._pollers[group]
            topic, position = self._groups[group]
            log = self._topic(topic)
            head = log.head
        if not poller.acquire(blocking=False):
            raise BusyGroupError(f"group {group!r} already has an active poller")
        try:
            upto = min(head, position + max_batch - 1)
            return [log.read(off, topic) for off in range(position, upto + 1)]
        finally:
            poller.release()

    def commit(self, group: str, offset: int) -> None:
        """Persist that everything up to and including `offset` is processed;
        the next poll starts at offset + 1."""
        with self._space:
            if group not in self._groups:
                raise UnknownGroupError(f"unknown group {group!r}")
            topic, position = self._groups[group]
            head = self._topic(topic).head
            if offset > head:
                raise BusError(f"cannot commit {offset}: {topic} head is {head}")
            if offset + 1 > position:
                self._groups[group] = (topic, offset + 1)
                self._save_groups()
            self._space.notify_all()

    def committed(self, group: str) -> int:
        """Last committed offset for the group (-1 before any commit)."""
        with self._lock:
            if group not in self._groups:
                raise UnknownGroupError(f"unknown group {group!r}")
            return self._groups[group][1] - 1

    def lag(self, group: str) -> int:
        with self._lock:
            if group not in self._groups:
                raise UnknownGroupError(f"unknown group {group!r}")
            topic, position = self._groups[group]
            return (self._topic(topic).head + 1) - position

    def close(self) -> None:
        with self._lock:
            for log in self._topics.values():
                log.close()
            self._topics.clear()
