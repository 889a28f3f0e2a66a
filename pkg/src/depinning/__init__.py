"""Deterministic interface dynamics in quenched random environments."""

__version__ = "0.1.0"
