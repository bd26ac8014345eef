"""Bias-aware domain generalisation on synthetic multi-environment data."""

__version__ = "0.1.0"
