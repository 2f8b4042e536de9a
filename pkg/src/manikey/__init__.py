"""Keypoint annotation on merged multi-camera point clouds by RBF regression of on-surface distances."""

__version__ = "0.1.0"
