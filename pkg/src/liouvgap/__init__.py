"""Liouvillian gaps of dissipative spin lattices from RBM trial density matrices."""

__version__ = "0.1.0"
