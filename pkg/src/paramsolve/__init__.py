"""Adaptive solvers for parametric elliptic problems in wavelet x Legendre coordinates."""

__version__ = "0.1.0"
