"""Doppler-based acoustic direction finding and indoor localization."""

__version__ = "0.1.0"
