"""Nebula: F0 and voicing estimation trained on Monte-Carlo synthetic data."""

__version__ = "0.1.0"
