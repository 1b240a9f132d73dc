"""Robust multiple-instance hashing: bag-level binary codes learned from weak labels."""

__version__ = "0.1.0"
