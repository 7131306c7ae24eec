"""Numerical laboratory for peakons of the b-family of shallow-water equations."""

__version__ = "0.1.0"
