"""Stochastic approximation for mixing-density estimation and related samplers."""

__version__ = "0.1.0"
