"""Desk-scale conditional diffusion for visible-to-infrared translation."""

__version__ = "0.1.0"
