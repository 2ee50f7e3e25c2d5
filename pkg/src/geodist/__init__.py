"""Surfaces encoded as diffusion-model point distributions."""

__version__ = "0.1.0"
