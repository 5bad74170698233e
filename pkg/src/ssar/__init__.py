"""Simultaneous segmentation and recognition of ego hand gestures."""

__version__ = "0.1.0"
