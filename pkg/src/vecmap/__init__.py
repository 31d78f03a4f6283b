"""Hybrid point/element query decoder for vectorized map construction, at desk scale."""

__version__ = "0.1.0"
