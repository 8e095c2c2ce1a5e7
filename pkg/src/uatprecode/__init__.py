"""Unsupervised adversarial training for learned QoS-constrained hybrid precoding."""

__version__ = "0.1.0"
