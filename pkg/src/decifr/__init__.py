"""Desk-scale federated gradient-inversion and membership-inference lab."""

__version__ = "0.1.0"
