"""Adversarial one-class anomaly detection for grayscale images."""

__version__ = "0.1.0"
