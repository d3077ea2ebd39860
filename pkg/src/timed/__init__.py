"""Diffusion-based time-series generation with autoregressive, adversarial and MMD refinement."""

__version__ = "0.1.0"
