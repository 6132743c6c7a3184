"""Numerical laboratory for higher-order stochastic homogenization on periodic lattices."""

__version__ = "0.1.0"
