"""Manifold-preserving adversarial example generation on toy datasets."""

__version__ = "0.1.0"
