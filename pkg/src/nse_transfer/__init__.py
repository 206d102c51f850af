"""Numerical laboratory for conditional transfer of regularity in Navier-Stokes."""

__version__ = "0.1.0"
