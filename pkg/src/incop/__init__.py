"""Iterative magnitude pruning with information/gradient-flow stopping."""

__version__ = "0.1.0"
