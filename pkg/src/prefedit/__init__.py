"""Preference post-training for low-dimensional flow models."""

__version__ = "0.1.0"
