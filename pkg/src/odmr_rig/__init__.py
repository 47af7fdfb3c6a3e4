"""Pulsed ODMR rig simulator: protocols, NV ensemble physics, signal chain and fits."""

__version__ = "0.1.0"
