"""Command line: serve the model service, or fine-tune the two models."""

from __future__ import annotations

import json
import sys

import click

from .data import CorpusFormatError
from .serving import ModelLoadError, create_app
from .train import TrainSettings, finetune_classifier, finetune_ner


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Transformer model service for relevance classification and tagging."""


@main.command()
@click.option("--classifier-model", "classifier_dir", required=True,
              type=click.Path(), help="Artifact directory of the classifier.")
@click.option("--ner-model", "ner_dir", required=True, type=click.Path(),
              help="Artifact directory of the tagger.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(classifier_dir: str, ner_dir: str, host: str, port: int):
    """Serve /v1/classify, /v1/ner and /healthz."""
    import uvicorn
    try:
        app = create_app(classifier_dir, ner_dir)
    except ModelLoadError as exc:
        _fail(str(exc))
    uvicorn.run(app, host=host, port=port, log_level="info")


def _hyperparameter_options(fn):
    for option in reversed([
        click.option("--lr", "learning_rate", type=float, default=2e-5,
                     show_default=True),
        click.option("--epochs", type=int, default=5, show_default=True),
        click.option("--weight-decay", type=float, default=0.01, show_default=True),
        click.option("--batch-size", type=int, default=2, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--smoke", is_flag=True,
                     help="1 epoch over at most 32 examples (CPU smoke run)."),
    ]):
        fn = option(fn)
    return fn


def _settings(learning_rate, epochs, weight_decay, batch_size, seed, smoke):
    return TrainSettings(learning_rate=learning_rate, epochs=epochs,
                         weight_decay=weight_decay, batch_size=batch_size,
                         seed=seed, smoke=smoke)


@main.command("finetune-classifier")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_hyperparameter_options
def finetune_classifier_cmd(corpus_path, out_dir, **hyper):
    """Fine-tune the binary relevance classifier."""
    try:
        meta = finetune_classifier(corpus_path, out_dir, _settings(**hyper))
    except CorpusFormatError as exc:
        _fail(str(exc))
    click.echo(json.dumps(meta, sort_keys=True))


@main.command("finetune-ner")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_hyperparameter_options
def finetune_ner_cmd(corpus_path, out_dir, **hyper):
    """Fine-tune the entity tagger."""
    try:
        meta = finetune_ner(corpus_path, out_dir, _settings(**hyper))
    except CorpusFormatError as exc:
        _fail(str(exc))
    click.echo(json.dumps(meta, sort_keys=True))


if __name__ == "__main__":
    main()
