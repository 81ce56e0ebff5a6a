"""Calibration metrics and train-time calibration losses for object detectors."""
__version__ = "0.1.0"
