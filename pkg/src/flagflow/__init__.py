"""Brownian motions on complex flag manifolds: simulation, functionals and limit checks."""

__version__ = "0.1.0"
