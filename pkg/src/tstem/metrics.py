"""System metrics: stage timings, relevancy ratios, harvest rate, per-spider
and per-source breakdowns, with JSON export and an HTTP snapshot endpoint.

Harvest rate follows the crawl report's inverted definition (total crawled
divided by relevant found); the conventional relevant/crawled ratio is also
exported as "precision_harvest_rate" so consumers are not misled.
"""

from __future__ import annotations

import json
import math
import random
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

UNDEFINED = None  # exported marker for ratios with a zero denominator

_RESERVOIR_SIZE = 1024


def harvest_rate(total_crawled: int, relevant: int) -> Optional[float]:
    """total / relevant; None (undefined marker) when relevant is zero."""
    if relevant == 0:
        return UNDEFINED
    return total_crawled / relevant


def relevancy_ratio(true_count: int, false_count: int) -> Optional[tuple[float, float]]:
    """(true %, false %) at 0.1 precision; None when both counts are zero."""
    total = true_count + false_count
    if total == 0:
        return UNDEFINED
    true_pct = round(100.0 * true_count / total, 1)
    return (true_pct, round(100.0 - true_pct, 1))


def percentage_breakdown(counts: dict[str, int]) -> dict[str, float]:
    """Percentages summing to 100 within 0.05 (largest-remainder rounding)."""
    total = sum(counts.values())
    if total == 0:
        return {}
    raw = {k: 100.0 * v / total for k, v in counts.items()}
    floored = {k: int(p * 100) / 100 for k, p in raw.items()}
    shortfall = round((100.0 - sum(floored.values())) * 100)
    order = sorted(raw, key=lambda k: raw[k] - floored[k], reverse=True)
    for k in order[:shortfall]:
        floored[k] = round(floored[k] + 0.01, 2)
    return {k: round(p, 2) for k, p in floored.items()}


class _TimingStat:
    """Running mean plus a fixed-size reservoir for the p95."""

    def __init__(self, seed: int = 0):
        self.count = 0
        self.total = 0.0
        self.reservoir: list[float] = []
        self._rng = random.Random(seed)

    def add(self, value: float) -> None:
        self.count += 1
        self.total += value
        if len(self.reservoir) < _RESERVOIR_SIZE:
            self.reservoir.append(value)
        else:
            j = self._rng.randrange(self.count)
            if j < _RESERVOIR_SIZE:
                self.reservoir[j] = value

    @property
    def mean(self) -> float:
        return self.total / self.count

    @property
    def p95(self) -> float:
        ordered = sorted(self.reservoir)
        idx = min(math.ceil(0.95 * len(ordered)) - 1, len(ordered) - 1)
        return ordered[max(idx, 0)]


@dataclass(frozen=True)
class MetricSnapshot:
    """Point-in-time aggregate; serializes losslessly to JSON."""

    window_start: float
    window_end: float
    stage_timings_ms: dict
    relevancy: dict
    total_crawled: int
    relevant_found: int
    harvest_rate: Optional[float]
    precision_harvest_rate: Optional[float]
    per_spider_crawled_pct: dict
    per_spider_relevant_pct: dict
    ioc_counts_by_source: dict
    ioc_pct_by_source: dict
    counters: dict

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, raw: str) -> "MetricSnapshot":
        return cls(**json.loads(raw))


class MetricsRegistry:
    """Concurrency-safe counters and timings; snapshot() sees a consistent
    cut of every counter."""

    def __init__(self, clock=None):
        import time
        self._clock = clock or time.time
        self._lock = threading.Lock()
        self._window_start = self._clock()
        self._timings: dict[tuple[str, str], _TimingStat] = {}
        self._relevancy: dict[str, list[int]] = {}  # source -> [true, false]
        self._crawled_by_spider: dict[str, int] = {}
        self._relevant_by_spider: dict[str, int] = {}
        self._ioc_by_source: dict[str, int] = {}
        self._counters: dict[str, int] = {}
        self.total_crawled = 0
        self.relevant_found = 0

    def record_stage_timing(self, stage: str, source: str, elapsed_ms: float) -> None:
        if stage not in ("classify", "extract", "e2e"):
            raise ValueError(f"unknown stage {stage!r}")
        if elapsed_ms < 0:
            raise ValueError("elapsed must be >= 0")
        with self._lock:
            stat = self._timings.get((stage, source))
            if stat is None:
                stat = self._timings[(stage, source)] = _TimingStat()
            stat.add(elapsed_ms)

    def record_relevancy(self, source: str, relevant: bool) -> None:
        with self._lock:
            pair = self._relevancy.setdefault(source, [0, 0])
            pair[0 if relevant else 1] += 1

    def record_crawled(self, spider: str, relevant: Optional[bool] = None) -> None:
        with self._lock:
            self.total_crawled += 1
            self._crawled_by_spider[spider] = self._crawled_by_spider.get(spider, 0) + 1
            if relevant:
                self.relevant_found += 1
                self._relevant_by_spider[spider] = self._relevant_by_spider.get(spider, 0) + 1

    def record_relevant_page(self, spider: str) -> None:
        with self._lock:
            self.relevant_found += 1
            self._relevant_by_spider[spider] = self._relevant_by_spider.get(spider, 0) + 1

    def record_ioc(self, source: str, count: int = 1) -> None:
        with self._lock:
            self._ioc_by_source[source] = self._ioc_by_source.get(source, 0) + count

    def increment(self, counter: str, by: int = 1) -> None:
        with self._lock:
            self._counters[counter] = self._counters.get(counter, 0) + by

    def counter(self, name: str) -> int:
        with self._lock:
            return self._counters.get(name, 0)

    def timing(self, stage: str, source: str) -> Optional[_TimingStat]:
        with self._lock:
            return self._timings.get((stage, source))

    def snapshot(self) -> MetricSnapshot:
        with self._lock:
            timings = {
                f"{stage}/{source}": {"mean_ms": stat.mean, "p95_ms": stat.p95,
                                      "count": stat.count}
                for (stage, source), stat in self._timings.items()
            }
            relevancy = {}
            for source, (t, f) in self._relevancy.items():
                ratio = relevancy_ratio(t, f)
                relevancy[source] = {
                    "true_count": t, "false_count": f,
                    "true_pct": ratio[0] if ratio else None,
                    "false_pct": ratio[1] if ratio else None,
                }
            return MetricSnapshot(
                window_start=self._window_start,
                window_end=self._clock(),
                stage_timings_ms=timings,
                relevancy=relevancy,
                total_crawled=self.total_crawled,
                relevant_found=self.relevant_found,
                harvest_rate=harvest_rate(self.total_crawled, self.relevant_found),
                precision_harvest_rate=(self.relevant_found / self.total_crawled
                                        if self.total_crawled else UNDEFINED),
                per_spider_crawled_pct=percentage_breakdown(self._crawled_by_spider),
                per_spider_relevant_pct=percentage_breakdown(self._relevant_by_spider),
                ioc_counts_by_source=dict(self._ioc_by_source),
                ioc_pct_by_source=percentage_breakdown(self._ioc_by_source),
                counters=dict(self._counters),
            )


class MetricsServer:
    """GET /metrics returns the current snapshot as JSON."""

    def __init__(self, registry: MetricsRegistry, host: str = "127.0.0.1", port: int = 0):
        registry_ref = registry

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                if self.path != "/metrics":
                    self.send_error(404)
                    return
                body = registry_ref.snapshot().to_json().encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer((host, port), Handler)
        self.address = f"http://{host}:{self._server.server_port}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> "MetricsServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
