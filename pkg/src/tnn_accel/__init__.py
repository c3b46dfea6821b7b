"""Contraction-sequence search and accelerator modeling for tensor-decomposed layers."""

__version__ = "0.1.0"
