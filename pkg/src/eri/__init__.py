"""Emotion reaction intensity estimation from face video clips."""

__version__ = "0.1.0"
