"""Numerical laboratory for the conformal scalar curvature equation."""

__version__ = "0.1.0"
