"""Dropout-discriminator adversarial domain adaptation on small MLPs."""

__version__ = "0.1.0"
