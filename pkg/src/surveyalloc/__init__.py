"""Adaptive allocation of human labels across survey questions under PPI."""

__version__ = "0.1.0"
