"""Tri-modal image fusion with joint super-resolution via conditional diffusion."""

__version__ = "0.1.0"
