"""Superparameterized moist atmospheric flow on spectral elements."""

__version__ = "0.1.0"
