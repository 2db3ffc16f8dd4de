"""Reconstructive sequence-graph network for key-shot video summarization."""

__version__ = "0.1.0"
