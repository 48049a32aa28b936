"""Identification of low-rank vector processes observed in noise."""

__version__ = "0.1.0"
