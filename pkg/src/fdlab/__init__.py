"""Numerical laboratory for convergence rates of fast diffusion toward Barenblatt profiles."""

__version__ = "0.1.0"
