"""Federated short-term household load forecasting."""

__version__ = "0.1.0"
