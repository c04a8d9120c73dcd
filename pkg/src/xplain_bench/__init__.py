"""Robustness of post-hoc visual explanations to image augmentations."""

__version__ = "0.1.0"
