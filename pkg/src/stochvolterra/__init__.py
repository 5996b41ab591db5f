"""Stochastic Volterra-series damage detection for uncertain nonlinear oscillators."""

__version__ = "0.1.0"
