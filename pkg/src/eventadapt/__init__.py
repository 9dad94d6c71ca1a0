"""Unsupervised domain adaptation for token-level event trigger extraction."""

__version__ = "0.1.0"
