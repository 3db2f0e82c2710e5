"""Pair-based self-supervised training and retrieval evaluation at desk scale."""

__version__ = "0.1.0"
