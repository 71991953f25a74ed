"""Desk-scale lab for adversarial instruction attacks on graph navigation."""

__version__ = "0.1.0"
