"""Discrete-event simulator of a beam-synchronous accelerator timing system."""

__version__ = "0.1.0"
