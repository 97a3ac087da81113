"""Image-folder to DENCFSv1 feature exporter."""

from .export import (
    BACKBONES,
    FEATURE_DIM,
    ExportError,
    ExportJob,
    FeatureNet,
    discover_images,
    export_features,
)

__version__ = "0.1.0"
