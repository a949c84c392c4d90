"""Numerical laboratory for the disordered generalized Poland-Scheraga model."""
__version__ = "0.1.0"
