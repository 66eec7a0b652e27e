"""Leak detection and localization for gravity drainage networks."""

__version__ = "0.1.0"
