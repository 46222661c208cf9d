"""Numerical laboratory for fractional semilinear heat equations."""

__version__ = "0.1.0"
