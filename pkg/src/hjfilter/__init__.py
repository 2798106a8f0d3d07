"""Learned Hamilton-Jacobi safety filters with a QP projection layer."""
__version__ = "0.1.0"
