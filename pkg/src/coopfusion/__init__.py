"""Collaborative camera-only 3D detection with ray-occupancy fusion."""

__version__ = "0.1.0"
