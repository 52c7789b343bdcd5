"""Plannable continuous latent states for 2D point-mass mazes."""

__version__ = "0.1.0"
