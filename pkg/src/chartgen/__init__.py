"""Rhythm-game chart tokenization, time-grid encoding and audio-conditioned chart models."""

__version__ = "0.1.0"
