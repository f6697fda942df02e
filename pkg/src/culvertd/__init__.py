"""Culvert/sewer inspection pipeline runtime."""

__version__ = "0.1.0"
