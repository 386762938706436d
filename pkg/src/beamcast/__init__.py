"""Beam prediction for mmWave links to terminals on a railway track."""

__version__ = "0.1.0"
