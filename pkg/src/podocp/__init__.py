"""Reduced order models for parametrized optimal flow control."""

__version__ = "0.1.0"
