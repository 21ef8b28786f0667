"""Health-aware multi-objective food recommendation."""

__version__ = "0.1.0"
