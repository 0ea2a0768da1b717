"""Simulation and design tools for a modular reconfigurable battery string
with coupled-inductor interconnections."""

__version__ = "0.1.0"
