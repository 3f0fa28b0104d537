"""Desk-scale two-speaker separation with text-domain correction,
codec-token re-synthesis, and time-frequency alignment."""

__version__ = "0.1.0"
