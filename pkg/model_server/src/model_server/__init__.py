"""Transformer-backed model service implementing the relevance-classification
and entity-tagging wire protocols, plus the fine-tuning entry points."""

__version__ = "0.1.0"
