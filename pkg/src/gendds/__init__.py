"""Desk-scale text-to-video diffusion for synthetic driving scenes."""

__version__ = "0.1.0"
