"""Differentiable 2D Gaussian splatting with planetary reflectance models."""

__version__ = "0.1.0"
