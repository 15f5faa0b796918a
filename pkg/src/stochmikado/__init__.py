"""Numerical convex integration for the stochastic transport equation on the torus."""

__version__ = "0.1.0"
