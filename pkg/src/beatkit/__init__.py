"""Dilated self-attention beat tracking toolkit (numpy, desk scale)."""

__version__ = "0.1.0"
