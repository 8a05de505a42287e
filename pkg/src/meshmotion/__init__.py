"""Desk-scale articulated 3D body recovery and motion prediction."""

__version__ = "0.1.0"
