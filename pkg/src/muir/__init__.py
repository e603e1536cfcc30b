"""Shared hypermodules that generate weight blocks across tasks and architectures."""

__version__ = "0.1.0"
