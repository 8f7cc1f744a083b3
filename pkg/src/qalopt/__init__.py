"""Optimal treatment-length strategies for restricted quality-adjusted lifetime."""

__version__ = "0.1.0"
