"""Boundary detection between a human-written prefix and a machine-generated suffix."""

__version__ = "0.1.0"
