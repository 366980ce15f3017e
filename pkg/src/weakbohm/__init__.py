"""Weak-value velocity fields, their naive observability and Bohmian trajectories."""
__version__ = "0.1.0"
