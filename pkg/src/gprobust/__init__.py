"""Gaussian-process robust learning control for Lagrangian systems."""

__version__ = "0.1.0"
