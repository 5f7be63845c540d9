"""Panoramic video animation and dynamic 3D Gaussian lifting."""

__version__ = "0.1.0"
