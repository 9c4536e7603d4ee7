"""Contrastive-gradient model merging with spectral diagnostics."""

__version__ = "0.1.0"
