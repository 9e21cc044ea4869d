"""Dual-label learning with irregularly present labels."""

__version__ = "0.1.0"
