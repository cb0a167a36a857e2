"""Weakly-supervised differentiable top-k retrieval of clean voxel shapes for scan queries."""

__version__ = "0.1.0"
