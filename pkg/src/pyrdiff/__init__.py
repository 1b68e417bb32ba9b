"""Coarse-to-fine latent diffusion over multi-scale vector-quantized pyramids."""

__version__ = "0.1.0"
