"""Secure log harvesting agents, warehouse and transport protocol."""

__version__ = "0.1.0"
