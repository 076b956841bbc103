"""Decoy-state MDI-QKD simulator."""

__version__ = "0.1.0"
