"""Porous medium flow with signed source and its incompressible (Hele-Shaw) limit."""

__version__ = "0.1.0"
