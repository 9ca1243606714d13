"""Quantised MLP intrusion detection for CAN traffic."""

__version__ = "0.1.0"
