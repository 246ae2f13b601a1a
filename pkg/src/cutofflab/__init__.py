"""Numerical laboratory for the cut-off phenomenon of small-noise diffusions."""

__version__ = "0.1.0"
