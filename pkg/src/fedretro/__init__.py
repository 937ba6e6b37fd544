"""Federated single-step retrosynthesis simulator with similarity-informed personalized aggregation."""

__version__ = "0.1.0"
