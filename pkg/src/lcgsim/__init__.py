"""Layered coalitional game simulator for operator-controlled D2D networks."""

__version__ = "0.1.0"
