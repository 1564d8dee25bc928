"""Frozen pretrained-CNN feature extraction for the attncap pipeline.

Feeds real RGB imagery into the captioner by writing its binary feature-file
format (the shared wire contract) from the last convolutional map of a
frozen backbone.
"""

from .extractor import (
    BACKBONE_GEOMETRY,
    BackboneUnavailable,
    ExtractorConfig,
    UnexpectedFeatureShape,
    UnreadableImage,
    extract,
    load_backbone,
)

__version__ = "0.1.0"
