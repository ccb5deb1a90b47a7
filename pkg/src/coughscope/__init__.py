"""Cough event detection and few-shot cough classification on numpy."""

__version__ = "0.1.0"
