"""Geometry-aided channel deduction: ray-traced features, pseudo channels, and a fusion network."""

__version__ = "0.1.0"
