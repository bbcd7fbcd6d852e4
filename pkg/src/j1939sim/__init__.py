"""Deterministic SAE J1939 network simulator with transport-protocol attack scenarios."""

__version__ = "0.1.0"
