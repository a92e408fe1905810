"""Desk-scale lab for embedding-similarity regularized language-model pretraining."""

__version__ = "0.1.0"
