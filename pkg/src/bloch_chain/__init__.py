"""Propagating Bloch modes of a diffusive cosine billiard chain."""

__version__ = "0.1.0"
