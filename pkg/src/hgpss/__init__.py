"""Hierarchical Gaussian-process spike-and-slab regression with EP inference."""

__version__ = "0.1.0"
