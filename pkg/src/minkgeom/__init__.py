"""Exact and differentiable integral-geometric descriptors of 2-D scalar fields."""

__version__ = "0.1.0"
