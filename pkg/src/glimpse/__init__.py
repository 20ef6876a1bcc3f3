"""Glimpse-based temporal event detection trained with REINFORCE."""

__version__ = "0.1.0"
