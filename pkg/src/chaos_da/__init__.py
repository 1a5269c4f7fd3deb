"""Reinforcement-learning data assimilation for the Lorenz '63 system."""

__version__ = "0.1.0"
