"""Cooperative multi-target positioning for cell-free massive MIMO."""

__version__ = "0.1.0"
