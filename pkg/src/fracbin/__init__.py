"""Fractional binary markets with proportional transaction costs."""
__version__ = "0.1.0"
