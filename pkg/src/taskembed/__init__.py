"""Conditional-adapter task embeddings: training, stability, probing and zero-shot transfer."""

__version__ = "0.1.0"
