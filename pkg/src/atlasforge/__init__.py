"""Multi-atlas, coarse-to-fine right-ventricle segmentation of cardiac MR slices."""

from .errors import AtlasForgeError, ConfigError, FormatError, GeometryError, NumericError, RegistrationError
from .grid import AtlasPair, AtlasSet, ImageGrid, LabelMap, RoiBox, load_image, load_labels, save_image
from .pipeline import PipelineConfig, segment_case, segment_slice

__version__ = "0.1.0"

__all__ = [
    "AtlasForgeError",
    "AtlasPair",
    "AtlasSet",
    "ConfigError",
    "FormatError",
    "GeometryError",
    "ImageGrid",
    "LabelMap",
    "NumericError",
    "PipelineConfig",
    "RegistrationError",
    "RoiBox",
    "load_image",
    "load_labels",
    "save_image",
    "segment_case",
    "segment_slice",
]
