"""Benchmark framework for active feature acquisition under a hard budget."""

__version__ = "0.1.0"
