"""Hybrid 1-bit CNN feature extractor with a bounded boosted-tree head."""

__version__ = "0.1.0"
