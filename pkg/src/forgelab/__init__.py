"""Desk-scale laboratory for data forging against training-trace verification."""

__version__ = "0.1.0"
