"""Source camera brand/model identification with a classifier-block-level
hierarchical convolutional network, built on a minimal numpy autograd
engine."""

__version__ = "0.1.0"
