"""Fog-side anomaly detection and QoS-aware transport for PMU data streams."""

__version__ = "0.1.0"
