"""Organ localization and segmentation for whole-body section images.

The pipeline combines a pixel color classifier, per-organ position priors and
a small numpy convolutional net that recognizes organ shapes.
"""

from .anatomy import OrganId, OrganSpec, PlausibleRegion, Registry, builtin_registry, candidate_boxes
from .chroma import ColorCategory, ColorModel
from .pipeline import PipelineConfig, SegmentationResult, segment_all_organs, segment_organ
from .raster import BitMask, RasterImage, Rect
from .shapenet import ShapeNet

__version__ = "0.1.0"

__all__ = [
    "BitMask",
    "ColorCategory",
    "ColorModel",
    "OrganId",
    "OrganSpec",
    "PipelineConfig",
    "PlausibleRegion",
    "RasterImage",
    "Rect",
    "Registry",
    "SegmentationResult",
    "ShapeNet",
    "builtin_registry",
    "candidate_boxes",
    "segment_all_organs",
    "segment_organ",
]
