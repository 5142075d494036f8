"""Numerical weighted pseudodifferential calculus on manifolds with ends."""

__version__ = "0.1.0"
