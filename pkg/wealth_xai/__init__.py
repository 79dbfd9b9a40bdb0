"""Nightlight transfer learning, ridge wealth head and explanation experiments on synthetic imagery."""

__version__ = "0.1.0"
