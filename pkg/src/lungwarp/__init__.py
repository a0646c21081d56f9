"""Diffeomorphic registration and signal-ratio analysis for inspiration/expiration
chest radiograph pairs (dark-field and attenuation)."""

from .imaging import BinaryMask, Grid2D, Image2D, LandmarkSet, MaskKind
from .transform import AffineTransform, DisplacementField, VelocityLattice

__version__ = "0.1.0"

__all__ = ["AffineTransform", "BinaryMask", "DisplacementField", "Grid2D", "Image2D",
           "LandmarkSet", "MaskKind", "VelocityLattice", "__version__"]
