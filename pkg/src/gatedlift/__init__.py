"""Occlusion-robust 2D-to-3D pose lifting with gated temporal convolutions."""

__version__ = "0.1.0"
