"""Desk-scale semi-supervised occupancy world model."""
__version__ = "0.1.0"
