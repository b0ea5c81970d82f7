"""Partial-scan shape reconstruction with cross-domain feature fusion and self-training."""

__version__ = "0.1.0"
