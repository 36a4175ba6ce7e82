"""Unsupervised bilateral Siamese co-training with mixture-model soft labels."""

__version__ = "0.1.0"
