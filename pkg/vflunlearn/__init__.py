"""Vertical federated learning simulator with client-level unlearning."""

__version__ = "0.1.0"
