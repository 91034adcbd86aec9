"""Desk-scale latent diffusion model for short video prediction."""

__version__ = "0.1.0"
