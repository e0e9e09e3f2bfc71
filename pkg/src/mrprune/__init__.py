"""Predict and prune minority reports in repeated crowd annotation."""

__version__ = "0.1.0"
