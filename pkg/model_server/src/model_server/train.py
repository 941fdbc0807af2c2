"""Fine-tuning entry points producing servable artifacts.

Defaults: learning rate 2e-5, 5 epochs, weight decay 0.01, batch size 2.
Without downloadable pretrained checkpoints the encoders are small randomly
initialized BERT configurations over a corpus-derived word vocabulary;
deployments with access to pretrained weights can point the server at any
artifact directory with the same layout:

    out_dir/
      meta.json           task, model_id, labels, max sequence length
      vocab.json          word -> id table
      config.json         encoder configuration
      model.safetensors   weights
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import torch
from transformers import (BertConfig, BertForSequenceClassification,
                          BertForTokenClassification)

from .data import (IOB_TAGS, TAG_TO_ID, load_classify_corpus, load_ner_corpus)
from .vocab import Vocab, word_tokenize

SMOKE_MAX_EXAMPLES = 32


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 2e-5
    epochs: int = 5
    weight_decay: float = 0.01
    batch_size: int = 2
    max_len: int = 128
    seed: int = 0
    smoke: bool = False  # cap at 1 epoch / 32 examples for CPU smoke runs

    def effective_epochs(self) -> int:
        return 1 if self.smoke else self.epochs

    def cap(self, corpus: list) -> list:
        return corpus[:SMOKE_MAX_EXAMPLES] if self.smoke else corpus


def _encoder_config(vocab_size: int, num_labels: int, max_len: int) -> BertConfig:
    return BertConfig(
        vocab_size=vocab_size, hidden_size=64, num_hidden_layers=2,
        num_attention_heads=2, intermediate_size=128,
        max_position_embeddings=max_len, num_labels=num_labels,
        pad_token_id=0)


def _pad_batch(sequences: list[list[int]], pad_id: int):
    width = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(sequences), width), dtype=torch.long)
    for i, seq in enumerate(sequences):
        ids[i, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[i, :len(seq)] = 1
    return ids, mask


def _train_loop(model, batches, settings: TrainSettings) -> float:
    optimizer = torch.optim.AdamW(model.parameters(), lr=settings.learning_rate,
                                  weight_decay=settings.weight_decay)
    model.train()
    last_loss = 0.0
    for _ in range(settings.effective_epochs()):
        for kwargs in batches:
            optimizer.zero_grad()
            out = model(**kwargs)
            out.loss.backward()
            optimizer.step()
            last_loss = out.loss.item()
    return last_loss


def _save(model, vocab: Vocab, out_dir: str, meta: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    model.save_pretrained(out_dir)
    vocab.save(os.path.join(out_dir, "vocab.json"))
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)


def finetune_classifier(corpus_path: str, out_dir: str,
                        settings: TrainSettings = TrainSettings()) -> dict:
    """Fine-tune the binary relevance classifier; returns the meta record."""
    torch.manual_seed(settings.seed)
    corpus = settings.cap(load_classify_corpus(corpus_path))
    token_lists = [[t for t, _, _ in word_tokenize(text)] for text, _ in corpus]
    vocab = Vocab.build(token_lists)
    model = BertForSequenceClassification(
        _encoder_config(len(vocab), num_labels=2, max_len=settings.max_len))

    batches = []
    for start in range(0, len(corpus), settings.batch_size):
        chunk = corpus[start:start + settings.batch_size]
        chunk_tokens = token_lists[start:start + settings.batch_size]
        sequences = [[vocab.cls_id] + vocab.encode(tokens)[:settings.max_len - 2]
                     + [vocab.sep_id] for tokens in chunk_tokens]
        ids, mask = _pad_batch(sequences, vocab.pad_id)
        labels = torch.tensor([int(label) for _, label in chunk], dtype=torch.long)
        batches.append({"input_ids": ids, "attention_mask": mask, "labels": labels})

    loss = _train_loop(model, batches, settings)
    meta = {"task": "classify", "model_id": f"encoder-classify-{len(corpus)}ex",
            "max_len": settings.max_len, "examples": len(corpus),
            "epochs": settings.effective_epochs(), "final_loss": loss}
    _save(model, vocab, out_dir, meta)
    return meta


def finetune_ner(corpus_path: str, out_dir: str,
                 settings: TrainSettings = TrainSettings()) -> dict:
    """Fine-tune the token-classification tagger; returns the meta record."""
    torch.manual_seed(settings.seed)
    corpus = settings.cap(load_ner_corpus(corpus_path))
    vocab = Vocab.build([tokens for tokens, _ in corpus])
    model = BertForTokenClassification(
        _encoder_config(len(vocab), num_labels=len(IOB_TAGS),
                        max_len=settings.max_len))

    batches = []
    for start in range(0, len(corpus), settings.batch_size):
        chunk = corpus[start:start + settings.batch_size]
        sequences, labels = [], []
        for tokens, tags in chunk:
            keep = settings.max_len - 2
            sequences.append([vocab.cls_id] + vocab.encode(tokens)[:keep]
                             + [vocab.sep_id])
            # special positions are masked out of the loss with -100
            labels.append([-100] + [TAG_TO_ID[t] for t in tags[:keep]] + [-100])
        ids, mask = _pad_batch(sequences, vocab.pad_id)
        width = ids.shape[1]
        label_tensor = torch.full((len(chunk), width), -100, dtype=torch.long)
        for i, row in enumerate(labels):
            label_tensor[i, :len(row)] = torch.tensor(row, dtype=torch.long)
        batches.append({"input_ids": ids, "attention_mask": mask,
                        "labels": label_tensor})

    loss = _train_loop(model, batches, settings)
    meta = {"task": "ner", "model_id": f"encoder-ner-{len(corpus)}ex",
            "labels": list(IOB_TAGS), "max_len": settings.max_len,
            "examples": len(corpus), "epochs": settings.effective_epochs(),
            "final_loss": loss}
    _save(model, vocab, out_dir, meta)
    return meta
