"""Inexact proximal DC algorithms for DC bilevel programs."""
__version__ = "0.1.0"
