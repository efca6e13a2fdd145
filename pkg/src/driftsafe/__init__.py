"""Passively safe impulsive rendezvous design with closed-loop dispersion analysis."""

from . import conic, dynamics, scp, stochastics, uq

__version__ = "0.1.0"

__all__ = ["conic", "dynamics", "scp", "stochastics", "uq"]
