"""Align a trainable 3D volume encoder with frozen 2D image/text embedders."""

__version__ = "0.1.0"
