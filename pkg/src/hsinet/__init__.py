"""Spectral-spatial hyperspectral pixel classification toolkit."""

__version__ = "0.1.0"
