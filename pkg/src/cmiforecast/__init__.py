"""Contrastive representation learning for binary time-series movement prediction."""

__version__ = "0.1.0"
