"""Disabled-vehicle road blockage and street-network fragmentation toolkit."""

__version__ = "0.1.0"
