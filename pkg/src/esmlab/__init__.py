"""Exact score matching laboratory: exact coupled DDIM inversion and score
distillation of a toy diffusion model into a 2D Gaussian-splat scene."""

__version__ = "0.1.0"
