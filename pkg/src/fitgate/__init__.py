"""Fog gateway for clinical speech: on-node feature extraction and cloud sync."""

__version__ = "0.1.0"
