"""Sequence transformer with a shared-weight bidirectional decoder."""

__version__ = "0.1.0"
