"""Simulation and verification toolkit for discrete-time chemotaxis particle systems."""
from __future__ import annotations

__version__ = "0.1.0"
