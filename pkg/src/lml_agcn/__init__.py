"""Lifelong multi-label classification with an augmented graph convolutional network."""

__version__ = "0.1.0"
