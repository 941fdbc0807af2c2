"""Post-stream ingestion: replay NDJSON fixtures or consume a long-lived
HTTP stream of newline-delimited JSON records, publishing each to the bus.

Delivery is session-scoped: a bounded set of recently seen record ids
suppresses duplicates within one run; cross-session exactly-once is not
promised (upstream sampling makes it impossible anyway).
"""

from __future__ import annotations

import json
import logging
import os
import random
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import requests

from .bus import Broker

logger = logging.getLogger(__name__)

TWEET_TOPIC = "tweet.raw"
DEDUP_WINDOW = 100_000


class StreamSourceError(Exception):
    pass


class AuthError(StreamSourceError):
    """Permanent: bad or missing credentials."""


def _canonical_payload(record: dict) -> bytes:
    """Canonical JSON so replayed bytes round-trip losslessly."""
    return json.dumps(record, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False).encode("utf-8")


class _SeenIds:
    """Insertion-ordered bounded set of the most recent record ids."""

    def __init__(self, capacity: int = DEDUP_WINDOW):
        self.capacity = capacity
        self._ids: OrderedDict[str, None] = OrderedDict()

    def add(self, record_id: str) -> bool:
        """True when the id is new (and record should be published)."""
        if record_id in self._ids:
            self._ids.move_to_end(record_id)
            return False
        self._ids[record_id] = None
        if len(self._ids) > self.capacity:
            self._ids.popitem(last=False)
        return True


@dataclass
class ReplayStats:
    published: int = 0
    skipped_malformed: int = 0
    skipped_duplicate: int = 0


def _validate(record) -> Optional[dict]:
    if (isinstance(record, dict) and isinstance(record.get("id"), str)
            and isinstance(record.get("text"), str) and "created_at" in record):
        return record
    return None


def replay(path: str, broker: Broker, *, rate: float = 100.0,
           loop: bool = False, max_records: Optional[int] = None,
           topic: str = TWEET_TOPIC, sleep=time.sleep) -> ReplayStats:
    """Publish a fixture file's records in order at no more than `rate`
    records per second. Malformed lines are skipped and counted; a missing
    file is a startup error. loop=True cycles the file until max_records."""
    if not os.path.exists(path):
        raise StreamSourceError(f"fixture file not found: {path}")
    if rate <= 0:
        raise StreamSourceError(f"rate must be positive, got {rate}")
    stats = ReplayStats()
    interval = 1.0 / rate
    while True:
        published_this_pass = 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if max_records is not None and stats.published >= max_records:
                    return stats
                line = line.strip()
                if not line:
                    continue
                try:
                    record = _validate(json.loads(line))
                except json.JSONDecodeError:
                    record = None
                if record is None:
                    stats.skipped_malformed += 1
                    continue
                broker.publish(topic, _canonical_payload(record))
                stats.published += 1
                published_this_pass += 1
                sleep(interval)
        if not loop or published_this_pass == 0:
            return stats


@dataclass
class StreamConfig:
    endpoint: str
    auth_token_env: str = "TSTEM_STREAM_TOKEN"
    topic: str = TWEET_TOPIC
    reconnect_base_seconds: float = 0.5
    reconnect_cap_seconds: float = 30.0
    max_reconnects: int = 5
    timeout_seconds: float = 30.0


@dataclass
class StreamStats:
    published: int = 0
    skipped_malformed: int = 0
    skipped_duplicate: int = 0
    reconnects: int = 0


def connect_http_stream(config: StreamConfig, broker: Broker, *,
                        session: Optional[requests.Session] = None,
                        max_records: Optional[int] = None,
                        sleep=time.sleep,
                        rng: Optional[random.Random] = None) -> StreamStats:
    """Consume newline-delimited JSON over a long-lived HTTP response,
    reconnecting with jittered exponential backoff on disconnects. Within
    this session no record id is published twice."""
    token = os.environ.get(config.auth_token_env)
    if not token:
        raise AuthError(f"auth token env var {config.auth_token_env} is not set")
    session = session or requests.Session()
    rng = rng or random.Random()
    stats = StreamStats()
    seen = _SeenIds()
    attempts = 0
    while attempts <= config.max_reconnects:
        try:
            resp = session.get(config.endpoint, stream=True,
                               headers={"Authorization": f"Bearer {token}"},
                               timeout=config.timeout_seconds)
            if resp.status_code in (401, 403):
                raise AuthError(f"stream endpoint rejected credentials "
                                f"(HTTP {resp.status_code})")
            if resp.status_code != 200:
                raise requests.HTTPError(f"HTTP {resp.status_code}")
            attempts = 0  # a healthy connection resets the backoff
            for raw in resp.iter_lines():
                if max_records is not None and stats.published >= max_records:
                    resp.close()
                    return stats
                if not raw:
                    continue
                try:
                    record = _validate(json.loads(raw.decode("utf-8")))
                except (json.JSONDecodeError, UnicodeDecodeError):
                    record = None
                if record is None:
                    stats.skipped_malformed += 1
                    continue
                if not seen.add(record["id"]):
                    stats.skipped_duplicate += 1
                    continue
                broker.publish(config.topic, _canonical_payload(record))
                stats.published += 1
            return stats  # clean end of stream
        except AuthError:
            raise
        except (requests.RequestException, OSError) as exc:
            attempts += 1
            if attempts > config.max_reconnects:
                raise StreamSourceError(
                    f"stream {config.endpoint}: gave up after "
                    f"{config.max_reconnects} reconnects: {exc}") from exc
            backoff = min(config.reconnect_cap_seconds,
                          config.reconnect_base_seconds * 2 ** (attempts - 1))
            delay = backoff * (0.5 + rng.random())
            logger.warning("stream disconnected (%s); reconnect %d in %.2fs",
                           exc, attempts, delay)
            stats.reconnects += 1
            sleep(delay)
    return stats
