"""Supervised hyperspectral unmixing with Gaussian mixture endmember models."""

__version__ = "0.1.0"
