"""Dual model predictive diffusion: belief-aware merge planning suite."""

__version__ = "0.1.0"
