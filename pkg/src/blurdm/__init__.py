"""Blur-aware latent diffusion prior for motion deblurring, at toy scale."""

__version__ = "0.1.0"
