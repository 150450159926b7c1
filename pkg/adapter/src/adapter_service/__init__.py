"""HTTP adapter service for the /v1 editing wire protocol."""

__version__ = "0.1.0"
