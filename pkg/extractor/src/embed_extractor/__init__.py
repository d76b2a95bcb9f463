"""Image-to-embedding extraction for the tract classification pipeline."""

__version__ = "0.1.0"

from .extract import BACKBONES, ManifestRow, extract, load_manifest

__all__ = ["__version__", "BACKBONES", "ManifestRow", "extract", "load_manifest"]
