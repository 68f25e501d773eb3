"""Weak-supervision dialogue state tracking with a copy-mechanism generator."""

__version__ = "0.1.0"
