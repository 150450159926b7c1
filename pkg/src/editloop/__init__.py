"""Closed-loop orchestration engine for instruction-guided image editing."""

__version__ = "0.1.0"
