"""Desk-scale numerical laboratory for duality in optimistic bilevel optimization."""

__version__ = "0.1.0"
