"""Subnetwork-selective fine-tuning on a small self-contained MLP."""

__version__ = "0.1.0"
