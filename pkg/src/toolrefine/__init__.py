"""Pseudo-label category refinement with multiple-instance learning on weak image labels."""

__version__ = "0.1.0"
