"""Sibling fully convolutional network for joint nuclei detection and
fine-grained classification, built on a small numpy autodiff core."""

__version__ = "0.1.0"
