"""Incremental policy iteration for model-free discounted optimal control."""

__version__ = "0.1.0"
