"""Interval-conditioned reference tokens for a toy video diffusion transformer."""

__version__ = "0.1.0"
