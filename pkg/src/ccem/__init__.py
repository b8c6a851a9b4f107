"""Curiosity-driven cross-entropy planning in a learned latent world model."""

__version__ = "0.1.0"
