"""Reinforcement-learned key-frame scheduling over a simulated video environment."""

__version__ = "0.1.0"
