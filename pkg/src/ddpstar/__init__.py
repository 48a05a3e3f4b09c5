"""Density regression with truncated single-weights dependent Dirichlet
process mixtures of normal structured additive regression models."""

__version__ = "0.1.0"
