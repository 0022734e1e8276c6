"""Masked voxel diffusion transformer for point-cloud generation."""

__version__ = "0.1.0"
