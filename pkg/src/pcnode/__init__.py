"""Piecewise-constant neural ODE sequence models, baselines, physics worlds and planning."""

__version__ = "0.1.0"
