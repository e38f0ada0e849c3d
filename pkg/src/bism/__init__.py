"""Bi-level score matching for energy-based latent variable models."""

__version__ = "0.1.0"
