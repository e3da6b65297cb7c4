"""Refrigerant-leak detection for cold rooms from thermostat-grade sensor streams."""

__version__ = "0.1.0"
