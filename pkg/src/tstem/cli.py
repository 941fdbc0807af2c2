"""Operator command line: run pipelines, replay fixtures, train/evaluate the
baseline classifier, inspect metrics and verify indicators.

stdout carries data only (JSON/NDJSON); logs and errors go to stderr.
Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import json
import logging
import sys
import tempfile
from typing import Optional

import click

from . import ner
from .bus import Broker
from .classifier import (BaselineModel, TrainConfig, evaluate, train_baseline)
from .core import Indicator, IndicatorType, ValidationError
from .enrichment import FixtureProvider, Verifier
from .extractor import extract_indicators, merge_with_ner
from .frontier import builtin_profiles
from .metrics import MetricsRegistry
from .pipeline import (ConfigError, PipelineError, build_tweet_pipeline,
                       build_web_pipeline, load_config)
from .sink import replay_archive
from .stream_source import StreamSourceError, replay

logger = logging.getLogger(__name__)


def _fail(message: str, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps({"error": message}), err=True)
    else:
        click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
@click.option("--json", "json_errors", is_flag=True,
              help="Emit machine-readable errors on stderr.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging on stderr.")
@click.pass_context
def main(ctx, json_errors: bool, verbose: bool):
    """Streaming OSINT collection and IOC extraction toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["json"] = json_errors
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load_config_or_fail(path: str, as_json: bool) -> dict:
    try:
        return load_config(path)
    except ConfigError as exc:
        _fail(str(exc), as_json)


@main.command()
@click.option("--config", "config_path", required=True,
              envvar="TSTEM_CONFIG", type=click.Path())
@click.option("--spider", "spider_name", default=None,
              help="Run a single named spider (default: all configured).")
@click.option("--max-pages", type=int, default=None)
@click.pass_context
def crawl(ctx, config_path: str, spider_name: Optional[str], max_pages: Optional[int]):
    """Run the focused web crawl pipeline until the frontier drains."""
    as_json = ctx.obj["json"]
    config = _load_config_or_fail(config_path, as_json)
    profiles = builtin_profiles()
    for raw in config.get("spiders", []):
        profiles[raw["name"]] = _profile_from_config(raw)
    names = [spider_name] if spider_name else list(config.get("run_spiders") or profiles)
    unknown = [n for n in names if n not in profiles]
    if unknown:
        _fail(f"unknown spider(s): {', '.join(unknown)}", as_json)
    bus_dir = config.get("bus", {}).get("root_dir") or tempfile.mkdtemp(prefix="tstem-bus-")
    broker = Broker(bus_dir)
    metrics = MetricsRegistry()
    try:
        for name in names:
            pipeline = build_web_pipeline(config, broker, profiles[name], metrics)
            pipeline.crawl_until_drained(max_pages=max_pages)
            pipeline.runner.sink.flush_remote()
            pipeline.runner.sink.close()
        click.echo(metrics.snapshot().to_json())
    except (PipelineError, OSError) as exc:
        _fail(str(exc), as_json)
    finally:
        broker.close()


def _profile_from_config(raw: dict):
    from .frontier import SpiderProfile
    return SpiderProfile(
        name=raw["name"], seeds=tuple(raw["seeds"]),
        scope=raw.get("scope", "open"),
        allowed_hosts=frozenset(raw.get("allowed_hosts", [])),
        max_depth=int(raw.get("max_depth", 3)),
        min_delay_seconds=float(raw.get("min_delay_seconds", 1.0)),
        keywords=tuple(raw.get("keywords", [])))


@main.command()
@click.option("--config", "config_path", required=True,
              envvar="TSTEM_CONFIG", type=click.Path())
@click.option("--fixture", "fixture_path", required=True, type=click.Path())
@click.option("--rate", type=float, default=100.0, show_default=True,
              help="Maximum records per second.")
@click.option("--loop", is_flag=True)
@click.option("--max-records", type=int, default=None)
@click.pass_context
def stream(ctx, config_path: str, fixture_path: str, rate: float,
           loop: bool, max_records: Optional[int]):
    """Replay a post fixture through the stream pipeline."""
    as_json = ctx.obj["json"]
    config = _load_config_or_fail(config_path, as_json)
    bus_dir = config.get("bus", {}).get("root_dir") or tempfile.mkdtemp(prefix="tstem-bus-")
    broker = Broker(bus_dir)
    metrics = MetricsRegistry()
    try:
        pipeline = build_tweet_pipeline(config, broker, metrics)
        stats = replay(fixture_path, broker, rate=rate, loop=loop,
                       max_records=max_records)
        pipeline.process_available()
        pipeline.runner.sink.flush_remote()
        pipeline.runner.sink.close()
        snapshot = json.loads(metrics.snapshot().to_json())
        snapshot["replay"] = stats.__dict__
        click.echo(json.dumps(snapshot, sort_keys=True))
    except (PipelineError, StreamSourceError, OSError) as exc:
        _fail(str(exc), as_json)
    finally:
        broker.close()


@main.command()
@click.option("--in", "in_path", default="-", show_default=True,
              help="Input file, or - for stdin.")
@click.option("--format", "in_format", type=click.Choice(["text", "ndjson"]),
              default="text", show_default=True)
@click.option("--ner/--no-ner", "use_ner", default=False,
              help="Merge deterministic entity-tagger output.")
@click.pass_context
def extract(ctx, in_path: str, in_format: str, use_ner: bool):
    """One-shot extraction: refang, scan, and print indicators as NDJSON."""
    as_json = ctx.obj["json"]
    try:
        raw = (sys.stdin.read() if in_path == "-"
               else open(in_path, encoding="utf-8").read())
    except OSError as exc:
        _fail(str(exc), as_json)
    texts = ([raw] if in_format == "text"
             else [json.loads(line)["text"] for line in raw.splitlines() if line.strip()])
    for text in texts:
        indicators = extract_indicators(text)
        if use_ner:
            indicators = merge_with_ner(indicators, ner.tag_fallback(text), text).indicators
        for indicator in indicators:
            click.echo(indicator.to_json())


def _read_corpus(path: str) -> list[tuple[str, bool]]:
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            record = json.loads(line)
            if "text" not in record or "relevant" not in record:
                raise ValueError(f"{path}:{lineno}: need \"text\" and \"relevant\" fields")
            corpus.append((str(record["text"]), bool(record["relevant"])))
    return corpus


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=5, show_default=True)
@click.option("--holdout", type=float, default=0.2, show_default=True)
@click.pass_context
def train(ctx, corpus_path: str, out_path: str, seed: int, epochs: int, holdout: float):
    """Train the hashed n-gram baseline and print its held-out report."""
    as_json = ctx.obj["json"]
    try:
        corpus = _read_corpus(corpus_path)
        import random as _random
        shuffled = list(corpus)
        _random.Random(seed).shuffle(shuffled)
        cut = max(1, int(len(shuffled) * holdout)) if 0 < holdout < 1 else 0
        held_out = shuffled[:cut] or None
        model, report = train_baseline(shuffled[cut:],
                                       TrainConfig(seed=seed, epochs=epochs),
                                       validation=held_out)
        model.save(out_path)
    except (OSError, ValueError) as exc:
        _fail(str(exc), as_json)
    click.echo(json.dumps({"model_id": model.model_id,
                           "report": report.to_json_dict() if report else None},
                          sort_keys=True))


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.pass_context
def eval_cmd(ctx, model_path: str, corpus_path: str, threshold: float):
    """Evaluate a saved baseline model on a labeled corpus."""
    from .classifier import score_text
    as_json = ctx.obj["json"]
    try:
        model = BaselineModel.load(model_path)
        corpus = _read_corpus(corpus_path)
        predictions = [score_text(model, text) >= threshold for text, _ in corpus]
        report = evaluate(predictions, [label for _, label in corpus])
    except (OSError, ValueError) as exc:
        _fail(str(exc), as_json)
    click.echo(json.dumps(report.to_json_dict(), sort_keys=True))


@main.command("metrics")
@click.option("--endpoint", default=None, help="Metrics HTTP endpoint to query.")
@click.option("--from-archive", "archive_path", default=None, type=click.Path(),
              help="Summarize an NDJSON sink archive instead.")
@click.pass_context
def metrics_cmd(ctx, endpoint: Optional[str], archive_path: Optional[str]):
    """Print a metrics snapshot (from a live endpoint or a sink archive)."""
    as_json = ctx.obj["json"]
    if (endpoint is None) == (archive_path is None):
        raise click.UsageError("pass exactly one of --endpoint or --from-archive")
    if endpoint is not None:
        import requests
        try:
            resp = requests.get(endpoint.rstrip("/") + "/metrics", timeout=10)
            resp.raise_for_status()
        except requests.RequestException as exc:
            _fail(str(exc), as_json)
        click.echo(resp.text)
        return
    try:
        records = replay_archive(archive_path)
    except (OSError, ValueError) as exc:
        _fail(str(exc), as_json)
    docs = [r for r in records if "raw_text" in r]
    iocs = [r for r in records if "raw_text" not in r]
    relevant = sum(1 for d in docs if (d.get("relevance") or {}).get("relevant"))
    click.echo(json.dumps({
        "documents": len(docs),
        "relevant_documents": relevant,
        "indicator_records": len(iocs),
        "unique_indicators": len({r["id"] for r in iocs}),
    }, sort_keys=True))


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(),
              help="NDJSON of indicators or lines of the form kind:value.")
@click.option("--fixture", "fixture_path", default=None, type=click.Path())
@click.option("--live", is_flag=True, help="Query live providers from config.")
@click.pass_context
def verify(ctx, in_path: str, fixture_path: Optional[str], live: bool):
    """Run an enrichment/verification pass over stored indicators."""
    as_json = ctx.obj["json"]
    if (fixture_path is None) == (not live):
        raise click.UsageError("pass exactly one of --fixture or --live")
    if live:
        _fail("live providers require endpoint configuration; use --fixture", as_json)
    try:
        providers = [FixtureProvider.load(name, fixture_path)
                     for name in ("virustotal", "alienvault")]
        verifier = Verifier(providers)
        with open(in_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("{"):
                    indicator = Indicator.from_json(line)
                else:
                    kind, _, value = line.partition(":")
                    indicator = Indicator(value=value, kind=IndicatorType(kind))
                click.echo(verifier.apply(indicator).to_json())
    except (OSError, ValueError, ValidationError) as exc:
        _fail(str(exc), as_json)


if __name__ == "__main__":
    main()
