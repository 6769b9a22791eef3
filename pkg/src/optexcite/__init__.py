"""Optimal excitation design by global sensitivity maximization."""
__version__ = "0.1.0"
