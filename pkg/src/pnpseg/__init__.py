"""Plug-and-play unsupervised domain adaptation for slice-wise segmentation."""

__version__ = "0.1.0"
