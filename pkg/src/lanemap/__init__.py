"""Lane-boundary geometry extraction from overhead imagery, and its evaluation."""

__version__ = "0.1.0"
