"""Linearized travel-time tomography by truncated Fourier reduction and quasi-reversibility."""

__version__ = "0.1.0"
