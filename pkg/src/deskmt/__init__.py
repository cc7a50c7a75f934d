"""Desk-scale transfer learning for low-resource NMT with cross-model consistency."""

__version__ = "0.1.0"
