"""Granular-ball domain alignment with simulated non-causal factors, at desk scale."""

__version__ = "0.1.0"
