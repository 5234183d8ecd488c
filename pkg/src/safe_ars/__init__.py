"""Barrier-function safe Augmented Random Search for under-voltage load shedding."""

__version__ = "0.1.0"
