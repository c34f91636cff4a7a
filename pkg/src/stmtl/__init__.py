"""Spatio-temporal multi-task segmentation and task-oriented saliency."""

__version__ = "0.1.0"
