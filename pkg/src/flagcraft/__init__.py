"""Validated flag-hiding technique library, sandboxed multi-flag environment
generator, episode scoring, and evaluation statistics."""

__version__ = "0.1.0"
