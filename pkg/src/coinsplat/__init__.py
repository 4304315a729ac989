"""Robust multi-view Gaussian splatting with a per-view inconsistency model."""

__version__ = "0.1.0"
