"""Desk-scale laboratory for score stability of denoising diffusion models."""

__version__ = "0.1.0"
