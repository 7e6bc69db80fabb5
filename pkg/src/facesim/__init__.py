"""Siamese multi-task regression of pairwise preference similarity from face images."""

__version__ = "0.1.0"
