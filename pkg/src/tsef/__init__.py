"""Dual-target adversarial attacks on time series classifiers and their explainers."""

__version__ = "0.1.0"
