"""Two-stage coarse-to-fine segmentation and tile-based removal of thin wires."""

from .imagecore import InvalidInputError
from .inpaint import DiffusionInpainter, tile_inpaint
from .model import OracleSegmenter, TinyConvSegmenter, load_checkpoint, save_checkpoint, train_tiny
from .pipeline import PipelineConfig, SegmentationResult, profile, remove, segment

__version__ = "0.1.0"

__all__ = [
    "InvalidInputError",
    "DiffusionInpainter",
    "tile_inpaint",
    "OracleSegmenter",
    "TinyConvSegmenter",
    "load_checkpoint",
    "save_checkpoint",
    "train_tiny",
    "PipelineConfig",
    "SegmentationResult",
    "profile",
    "remove",
    "segment",
]
