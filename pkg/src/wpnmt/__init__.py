"""Attention GRU translation with word-prediction supervision."""

__version__ = "0.1.0"
