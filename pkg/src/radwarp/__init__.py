"""Radar-to-camera cross-modal supervision toolkit."""

__version__ = "0.1.0"
