"""Vectorized map-element learning on a bird's-eye-view grid."""

__version__ = "0.1.0"
