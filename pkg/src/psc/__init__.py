"""Desk-scale audio-driven lip-sync pipeline on a procedural synthetic world."""

__version__ = "0.1.0"
