"""Ordered Top-k adversarial attacks on a small numpy classifier."""

__version__ = "0.1.0"
