"""Branching random walks on free products of groups."""

__version__ = "0.1.0"
