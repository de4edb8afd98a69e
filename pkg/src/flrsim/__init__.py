"""Federated learning simulator with label-mixture regularization against noisy labels."""

__version__ = "0.1.0"
