"""Equivariant matrix-product-state message passing for geometric graphs."""

__version__ = "0.1.0"
