"""Continual NER tagger with pooled attention-map distillation and
confidence-filtered pseudo-labels."""

__version__ = "0.1.0"
