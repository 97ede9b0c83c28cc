"""Hybrid minimum-seeking feedback simulator."""

__version__ = "0.1.0"
