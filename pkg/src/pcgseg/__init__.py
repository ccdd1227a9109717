"""Segmental CNN and feature-based classification of heart sound recordings."""

__version__ = "0.1.0"

NORMAL = 0
ABNORMAL = 1
