"""Numerical laboratory for stochastic Volterra equations with kernel-cone coefficients."""

__version__ = "0.1.0"
