"""Monocular visual teach & repeat on a locally planar ground model."""

__version__ = "0.1.0"
