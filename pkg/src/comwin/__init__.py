"""Compete-to-win co-training for semi-supervised segmentation."""

__version__ = "0.1.0"
