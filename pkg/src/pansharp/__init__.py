"""Unsupervised full-resolution pansharpening with co-registration-aware losses."""

__version__ = "0.1.0"
