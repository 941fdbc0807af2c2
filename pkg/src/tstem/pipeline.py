"""Wires the stages into the two dataflows — post stream and focused web
crawl — over the bus: source → relevance → extraction (rules + NER merge)
→ enrichment → sink, with timing hooks into metrics.

Stages run as independent consumer groups; offsets are committed only after
the sink acks, so delivery is at-least-once end to end and the sink's key
dedup absorbs replays. Stage errors route the record to a per-stage
dead-letter topic and the pipeline keeps going.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

from . import classifier as clf
from . import ner
from .bus import Broker, TopicRecord
from .classifier import BaselineModel, ChunkingPolicy
from .core import Channel, Document, RelevanceVerdict, SourceKind
from .enrichment import Verifier
from .extractor import extract_indicators, merge_with_ner
from .fetcher import (ConfigurationError, FetchConfig, PermanentFetchError,
                      TransientFetchError, extract_text, fetch)
from .frontier import (CrawlTask, Frontier, SpiderProfile, extract_links,
                       lexical_prefilter)
from .metrics import MetricsRegistry
from .sink import Sink, RemoteSinkConfig

logger = logging.getLogger(__name__)

TWEET_TOPIC = "tweet.raw"
WEB_TOPIC = "web.raw"
DLQ_CLASSIFY = "dlq.classify"
DLQ_EXTRACT = "dlq.extract"

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class PipelineError(Exception):
    pass


class ConfigError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _interpolate(value):
    """Replace ${VAR} with the environment value, recursively."""
    if isinstance(value, str):
        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"config references unset env var {name}")
            return os.environ[name]
        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def load_config(path: str) -> dict:
    """Parse the YAML config file and interpolate ${ENV_VAR} references."""
    import yaml
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must be a mapping at top level")
    return _interpolate(raw)


# ---------------------------------------------------------------------------
# pluggable stages

class Scorer:
    """Relevance scoring via a local baseline model or a remote service."""

    def __init__(self, model: Optional[BaselineModel] = None,
                 endpoint: Optional[str] = None,
                 threshold: float = clf.DEFAULT_THRESHOLD,
                 policy: ChunkingPolicy = clf.DEFAULT_POLICY):
        if (model is None) == (endpoint is None):
            raise ConfigError("scorer needs exactly one of model or endpoint")
        self.model = model
        self.endpoint = endpoint
        self.threshold = threshold
        self.policy = policy

    @classmethod
    def from_config(cls, section: dict) -> "Scorer":
        model = None
        if section.get("model_path"):
            model = BaselineModel.load(section["model_path"])
        return cls(model=model, endpoint=section.get("endpoint"),
                   threshold=float(section.get("threshold", clf.DEFAULT_THRESHOLD)))

    def score_sentence(self, text: str) -> RelevanceVerdict:
        if self.model is not None:
            score = clf.score_text(self.model, text)
            return RelevanceVerdict.from_score(score, self.threshold,
                                               "sentence", self.model.model_id)
        return clf.remote_score(self.endpoint, text, "sentence", self.threshold)

    def score_page(self, text: str) -> RelevanceVerdict:
        if self.model is not None:
            return clf.score_page(self.model, text, self.policy, self.threshold)
        return clf.remote_score(self.endpoint, text, "page", self.threshold)

    def score_post(self, text: str) -> RelevanceVerdict:
        """A post is relevant iff any of its sentences is (OR composition);
        the reported score is the maximum sentence score."""
        sentences = clf.split_sentences(text) or [(text, 0)]
        verdicts = [self.score_sentence(sentence) for sentence, _ in sentences]
        best = max(verdicts, key=lambda v: v.score)
        return RelevanceVerdict(score=best.score,
                                relevant=any(v.relevant for v in verdicts),
                                granularity="sentence", model_id=best.model_id)


class Tagger:
    """Entity tagging via the remote service, degrading to the deterministic
    fallback when the service is unreachable (if enabled)."""

    def __init__(self, endpoint: Optional[str] = None, fallback: bool = True):
        if endpoint is None and not fallback:
            raise ConfigError("tagger needs an endpoint or fallback enabled")
        self.endpoint = endpoint
        self.fallback = fallback

    @classmethod
    def from_config(cls, section: dict) -> "Tagger":
        return cls(endpoint=section.get("endpoint"),
                   fallback=bool(section.get("fallback", True)))

    def tag(self, text: str):
        """Returns (spans, used_fallback)."""
        if self.endpoint is not None:
            try:
                return ner.tag_remote(self.endpoint, text).spans, False
            except (clf.TransportError, clf.ProtocolError):
                if not self.fallback:
                    raise
        return ner.tag_fallback(text), self.endpoint is not None


# ---------------------------------------------------------------------------
# shared processing core

@dataclass
class PipelineCounters:
    consumed: int = 0
    indexed_documents: int = 0
    indexed_indicators: int = 0
    dead_lettered: int = 0
    irrelevant: int = 0


class _StageRunner:
    """Common relevance → extraction → enrichment → sink path."""

    def __init__(self, broker: Broker, sink: Sink, scorer: Scorer,
                 tagger: Tagger, metrics: MetricsRegistry,
                 verifier: Optional[Verifier] = None,
                 index_irrelevant_stubs: bool = True):
        self.broker = broker
        self.sink = sink
        self.scorer = scorer
        self.tagger = tagger
        self.metrics = metrics
        self.verifier = verifier
        self.index_irrelevant_stubs = index_irrelevant_stubs
        self.counters = PipelineCounters()

    def _dead_letter(self, topic: str, document_json: dict, reason: str) -> None:
        payload = json.dumps({"reason": reason, "record": document_json},
                             sort_keys=True).encode("utf-8")
        self.broker.publish(topic, payload)
        self.counters.dead_lettered += 1
        self.metrics.increment("dead_lettered")

    def process_document(self, doc: Document,
                         score: Callable[[str], RelevanceVerdict]) -> bool:
        """Run one document through scoring, extraction and the sink.
        Returns True when fully handled (indexed or dead-lettered)."""
        source = doc.source.to_wire()
        started = time.monotonic()

        try:
            t0 = time.monotonic()
            verdict = score(doc.raw_text)
            self.metrics.record_stage_timing("classify", source,
                                             (time.monotonic() - t0) * 1000.0)
        except Exception as exc:  # scoring is a remote call; anything can fail
            self._dead_letter(DLQ_CLASSIFY, doc.to_json_dict(), str(exc))
            return True
        self.metrics.record_relevancy(source, verdict.relevant)

        if not verdict.relevant:
            self.counters.irrelevant += 1
            if self.index_irrelevant_stubs:
                stub = Document(source=doc.source, ref=doc.ref, raw_text=doc.raw_text,
                                fetched_at=doc.fetched_at, relevance=verdict)
                self.sink.index_record(stub)
                self.counters.indexed_documents += 1
            return True

        try:
            t0 = time.monotonic()
            rule_out = extract_indicators(doc.raw_text)
            spans, used_fallback = self.tagger.tag(doc.raw_text)
            if used_fallback:
                self.metrics.increment("ner_fallback_used")
            merged = merge_with_ner(rule_out, spans, doc.raw_text)
            self.metrics.record_stage_timing("extract", source,
                                             (time.monotonic() - t0) * 1000.0)
        except Exception as exc:
            self._dead_letter(DLQ_EXTRACT, doc.to_json_dict(), str(exc))
            return True

        indicators = []
        for indicator in merged.indicators:
            indicator = replace(indicator, sources=frozenset({doc.source}))
            if self.verifier is not None:
                indicator = self.verifier.apply(indicator)
            indicators.append(indicator)

        enriched = Document(source=doc.source, ref=doc.ref, raw_text=doc.raw_text,
                            fetched_at=doc.fetched_at, relevance=verdict,
                            indicators=tuple(indicators),
                            context_tags=tuple(merged.context_tags))
        self.sink.index_record(enriched)
        self.counters.indexed_documents += 1
        for indicator in indicators:
            newly = not self.sink.contains(indicator.key)
            self.sink.index_record(indicator)
            self.counters.indexed_indicators += 1
            if newly:
                self.metrics.record_ioc(source)
        self.metrics.record_stage_timing("e2e", source,
                                         (time.monotonic() - started) * 1000.0)
        return True


# ---------------------------------------------------------------------------
# tweet dataflow

class TweetPipeline:
    """Consumes posts from the stream topic, scores sentence-wise, extracts
    from relevant posts, and commits offsets only after the sink acks."""

    GROUP = "pipeline.tweet"

    def __init__(self, broker: Broker, sink: Sink, scorer: Scorer, tagger: Tagger,
                 metrics: Optional[MetricsRegistry] = None,
                 verifier: Optional[Verifier] = None,
                 index_irrelevant_stubs: bool = True):
        self.broker = broker
        self.metrics = metrics or MetricsRegistry()
        self.runner = _StageRunner(broker, sink, scorer, tagger, self.metrics,
                                   verifier, index_irrelevant_stubs)
        broker.register_group(self.GROUP, TWEET_TOPIC)

    @property
    def counters(self) -> PipelineCounters:
        return self.runner.counters

    def _to_document(self, record: TopicRecord) -> Optional[Document]:
        try:
            body = record.json()
            return Document(source=SourceKind(Channel.TWITTER),
                            ref=str(body["id"]), raw_text=str(body["text"]))
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            self.runner._dead_letter(DLQ_CLASSIFY,
                                     {"offset": record.offset, "topic": record.topic},
                                     f"undecodable record: {exc}")
            return None

    def process_available(self, max_batch: int = 100) -> int:
        """Drain whatever is currently on the topic; returns records handled."""
        handled = 0
        while True:
            batch = self.broker.poll(self.GROUP, max_batch=max_batch)
            if not batch:
                return handled
            for record in batch:
                doc = self._to_document(record)
                if doc is not None:
                    self.runner.process_document(doc, self.runner.scorer.score_post)
                self.counters.consumed += 1
                self.broker.commit(self.GROUP, record.offset)
                handled += 1


# ---------------------------------------------------------------------------
# web dataflow

@dataclass
class WebCounters:
    fetched: int = 0
    fetch_permanent_errors: int = 0
    fetch_transient_failures: int = 0
    skipped_content_type: int = 0
    prefilter_rejected: int = 0
    robots_disallowed: int = 0
    published: int = 0


class WebPipeline:
    """Frontier → fetch → text extraction → lexical prefilter → bus →
    page-level relevance → extraction → sink, with link re-entry."""

    GROUP = "pipeline.web"

    def __init__(self, broker: Broker, sink: Sink, scorer: Scorer, tagger: Tagger,
                 profile: SpiderProfile, fetch_config: Optional[FetchConfig] = None,
                 metrics: Optional[MetricsRegistry] = None,
                 verifier: Optional[Verifier] = None,
                 transport=None, clock=time.monotonic, sleep=time.sleep,
                 index_irrelevant_stubs: bool = True):
        self.broker = broker
        self.profile = profile
        self.fetch_config = fetch_config or FetchConfig()
        self.metrics = metrics or MetricsRegistry()
        self.transport = transport
        self.clock = clock
        self.sleep = sleep
        self.runner = _StageRunner(broker, sink, scorer, tagger, self.metrics,
                                   verifier, index_irrelevant_stubs)
        self.frontier = Frontier(profile)
        self.frontier.seed()
        self.web_counters = WebCounters()
        self._robots: dict[str, Optional[object]] = {}  # host -> parser or None
        broker.register_group(self.GROUP, WEB_TOPIC)

    @property
    def counters(self) -> PipelineCounters:
        return self.runner.counters

    def _channel(self) -> Channel:
        return Channel.DARK_WEB if self.profile.scope == "onion_only" else Channel.CLEAR_WEB

    def _robots_allows(self, task: CrawlTask) -> bool:
        """Honor robots.txt on clear-web hosts (onion services have no such
        convention); failures to fetch the file mean no restrictions."""
        from urllib.parse import urlsplit
        from urllib.robotparser import RobotFileParser

        parts = urlsplit(task.url)
        if parts.hostname is None or parts.hostname.endswith(".onion"):
            return True
        host_key = f"{parts.scheme}://{parts.netloc}"
        if host_key not in self._robots:
            parser = None
            robots_task = CrawlTask(url=f"{host_key}/robots.txt",
                                    spider=task.spider, depth=task.depth)
            try:
                result = fetch(robots_task, self.fetch_config,
                               transport=self.transport, sleep=self.sleep)
                parser = RobotFileParser()
                parser.parse(result.body.decode("utf-8", errors="replace").splitlines())
            except Exception:
                parser = None
            self._robots[host_key] = parser
        parser = self._robots[host_key]
        return parser is None or parser.can_fetch(self.fetch_config.user_agent, task.url)

    def _fetch_one(self, task: CrawlTask) -> bool:
        """Fetch, filter and publish one page; True when a page reached the bus."""
        if not self._robots_allows(task):
            self.web_counters.robots_disallowed += 1
            self.metrics.increment("robots_disallowed")
            return False
        try:
            result = fetch(task, self.fetch_config, transport=self.transport,
                           sleep=self.sleep)
        except (PermanentFetchError, ConfigurationError) as exc:
            logger.info("permanent fetch failure for %s: %s", task.url, exc)
            self.web_counters.fetch_permanent_errors += 1
            self.metrics.increment("fetch_permanent_errors")
            return False
        except TransientFetchError as exc:
            logger.info("fetch retries exhausted for %s: %s", task.url, exc)
            self.web_counters.fetch_transient_failures += 1
            self.metrics.increment("fetch_transient_failures")
            return False
        self.web_counters.fetched += 1

        html = result.body.decode("utf-8", errors="replace")
        for link in extract_links(html, result.final_url):
            self.frontier.enqueue(CrawlTask(url=link, spider=task.spider,
                                            depth=task.depth + 1,
                                            discovered_from=task.url))

        text = extract_text(result.body, result.content_type)
        if text is None:
            self.web_counters.skipped_content_type += 1
            self.metrics.increment("skipped_content_type")
            return False
        if not lexical_prefilter(text, self.profile):
            self.web_counters.prefilter_rejected += 1
            self.metrics.increment("prefilter_rejected")
            self.metrics.record_crawled(task.spider, relevant=False)
            return False

        doc = Document(source=SourceKind(self._channel(), task.spider),
                       ref=result.final_url, raw_text=text,
                       fetched_at=result.fetched_at)
        self.broker.publish(WEB_TOPIC, doc.to_json().encode("utf-8"))
        self.web_counters.published += 1
        return True

    def process_available(self, max_batch: int = 100) -> int:
        """Drain the web topic through scoring/extraction/sink."""
        handled = 0
        while True:
            batch = self.broker.poll(self.GROUP, max_batch=max_batch)
            if not batch:
                return handled
            for record in batch:
                try:
                    doc = Document.from_json(record.payload.decode("utf-8"))
                except (ValueError, KeyError, UnicodeDecodeError) as exc:
                    self.runner._dead_letter(
                        DLQ_CLASSIFY, {"offset": record.offset, "topic": record.topic},
                        f"undecodable record: {exc}")
                    doc = None
                if doc is not None:
                    self._score_and_process(doc)
                self.counters.consumed += 1
                self.broker.commit(self.GROUP, record.offset)
                handled += 1

    def _score_and_process(self, doc: Document) -> bool:
        verdict_holder: list[RelevanceVerdict] = []

        def score(text: str) -> RelevanceVerdict:
            verdict = self.runner.scorer.score_page(text)
            verdict_holder.append(verdict)
            return verdict

        done = self.runner.process_document(doc, score)
        if verdict_holder:
            self.metrics.record_crawled(doc.source.spider,
                                        relevant=verdict_holder[0].relevant)
        return done

    def crawl_until_drained(self, max_pages: Optional[int] = None,
                            stop: Optional[threading.Event] = None) -> None:
        """Dispatch the frontier with politeness, interleaving fetch and
        processing until both the frontier and the topic are drained."""
        pages = 0
        while stop is None or not stop.is_set():
            if max_pages is not None and pages >= max_pages:
                break
            task = self.frontier.next_ready(self.clock())
            if task is None:
                if self.frontier.pending() == 0:
                    break
                eligible_at = self.frontier.next_eligible_at()
                if eligible_at is not None:
                    self.sleep(max(0.0, eligible_at - self.clock()))
                continue
            self._fetch_one(task)
            pages += 1
            self.process_available()
        self.process_available()


# ---------------------------------------------------------------------------
# run handles and shutdown

class RunHandle:
    """A pipeline executing on a background thread with graceful shutdown."""

    def __init__(self, target: Callable[[threading.Event], None]):
        self._stop = threading.Event()
        self._error: Optional[BaseException] = None

        def run():
            try:
                target(self._stop)
            except BaseException as exc:  # surfaced via .error
                self._error = exc

        self._thread = threading.Thread(target=run, daemon=True)
        self._thread.start()

    @property
    def error(self) -> Optional[BaseException]:
        return self._error

    def shutdown(self, grace_seconds: float = 10.0) -> str:
        """Stop sources, wait up to the grace period for in-flight records
        to drain; 'drained' iff the worker finished inside the grace."""
        self._stop.set()
        self._thread.join(grace_seconds)
        return "forced" if self._thread.is_alive() else "drained"


def run_tweet_pipeline(pipeline: TweetPipeline,
                       poll_interval: float = 0.05) -> RunHandle:
    def worker(stop: threading.Event):
        while not stop.is_set():
            if pipeline.process_available() == 0:
                stop.wait(poll_interval)
        pipeline.process_available()  # final drain after sources stop

    return RunHandle(worker)


def run_web_pipeline(pipeline: WebPipeline,
                     max_pages: Optional[int] = None) -> RunHandle:
    def worker(stop: threading.Event):
        pipeline.crawl_until_drained(max_pages=max_pages, stop=stop)

    return RunHandle(worker)


# ---------------------------------------------------------------------------
# assembly from config

def build_tweet_pipeline(config: dict, broker: Broker,
                         metrics: Optional[MetricsRegistry] = None) -> TweetPipeline:
    sink = _build_sink(config)
    return TweetPipeline(
        broker=broker, sink=sink,
        scorer=Scorer.from_config(config.get("classifier", {})),
        tagger=Tagger.from_config(config.get("ner", {})),
        metrics=metrics,
        verifier=_build_verifier(config),
        index_irrelevant_stubs=bool(config.get("sink", {}).get("index_irrelevant", True)))


def build_web_pipeline(config: dict, broker: Broker, profile: SpiderProfile,
                       metrics: Optional[MetricsRegistry] = None) -> WebPipeline:
    sink = _build_sink(config)
    fetch_section = config.get("fetch", {})
    fetch_config = FetchConfig(
        socks_proxy=fetch_section.get("socks_proxy"),
        timeout_seconds=float(fetch_section.get("timeout_seconds", 30.0)),
        retries=int(fetch_section.get("retries", 3)))
    return WebPipeline(
        broker=broker, sink=sink,
        scorer=Scorer.from_config(config.get("classifier", {})),
        tagger=Tagger.from_config(config.get("ner", {})),
        profile=profile, fetch_config=fetch_config, metrics=metrics,
        verifier=_build_verifier(config),
        index_irrelevant_stubs=bool(config.get("sink", {}).get("index_irrelevant", True)))


def _build_sink(config: dict) -> Sink:
    section = config.get("sink", {})
    if "archive_path" not in section:
        raise ConfigError("sink.archive_path is required")
    remote = None
    if section.get("remote_url"):
        remote = RemoteSinkConfig(base_url=section["remote_url"],
                                  index_prefix=section.get("index_prefix", "tstem"),
                                  batch_size=int(section.get("batch_size", 50)))
    return Sink(section["archive_path"], remote=remote)


def _build_verifier(config: dict) -> Optional[Verifier]:
    section = config.get("enrichment", {})
    if not section.get("fixture_path"):
        return None
    from .enrichment import FixtureProvider
    providers = [FixtureProvider.load(name, section["fixture_path"])
                 for name in section.get("providers", ["provider"])]
    return Verifier(providers)
