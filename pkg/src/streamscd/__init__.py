"""Streaming speech translation with token-level speaker change detection and gender tagging."""

__version__ = "0.1.0"
