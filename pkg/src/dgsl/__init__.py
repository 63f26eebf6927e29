"""Dynamic graph structure learning: kernelized message passing, selective scans and PRI regularization."""

__version__ = "0.1.0"
