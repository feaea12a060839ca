"""einstream: fusion-centric sparse einsum compiler and stream simulator."""

__version__ = "0.1.0"
