"""Differentiable Gaussian-mixture weight sharing with a bit-packed codebook runtime."""

__version__ = "0.1.0"
