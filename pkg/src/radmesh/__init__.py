"""Textured surface meshes from posed images: grid radiance field, mesh extraction and refinement, baking."""
from .estimators import RadianceFieldRegressor, SurfaceRefiner, TextureBaker

__version__ = "0.1.0"
__all__ = ["RadianceFieldRegressor", "SurfaceRefiner", "TextureBaker", "__version__"]
