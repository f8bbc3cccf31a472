"""Residual rib suppression with disentangled DRR-to-CXR domain adaptation."""

__version__ = "0.1.0"
