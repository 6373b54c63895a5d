"""Federated learning engine for tabular claims-loss regression."""

__version__ = "0.1.0"
