"""Deployment-aware adversarial evaluation of synthetic-image detectors."""

__version__ = "0.1.0"
