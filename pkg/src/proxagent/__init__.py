"""proxagent: modular embodied agent framework for spacecraft proximity operations."""

__version__ = "0.1.0"
