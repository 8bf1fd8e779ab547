"""Retrieval-augmented zero-shot forecasting on top of a frozen patch backbone."""

__version__ = "0.1.0"
