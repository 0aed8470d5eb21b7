"""Secure distributed HMM segmentation of 3D volumes."""

__version__ = "0.1.0"
