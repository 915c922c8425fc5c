"""Latent diffusion-constrained Q-learning over trajectory skills."""

__version__ = "0.1.0"
