"""Synthetic phantoms, preprocessing, batch sampling and volume files."""
from .io import (
    VolumeFormatError,
    load_split,
    load_validation,
    read_manifest,
    read_volume,
    save_split,
    write_manifest,
    write_volume,
)
from .phantom import (
    PhantomSpec,
    ShapeSpec,
    class_fractions,
    default_phantom_spec,
    generate_phantom,
    generate_volume,
)
from .preprocess import (
    HU_WINDOW,
    TARGET_SPACING,
    clip_hu,
    percentile_normalize,
    preprocess,
    preprocess_split,
    resample_spacing,
    resampled_dims,
)
from .sampling import Batch, augment, sample_batch
from .types import DatasetSplit, HiddenLabels, LabelMap, Volume

__all__ = [
    "Batch",
    "DatasetSplit",
    "HU_WINDOW",
    "HiddenLabels",
    "LabelMap",
    "PhantomSpec",
    "ShapeSpec",
    "TARGET_SPACING",
    "Volume",
    "VolumeFormatError",
    "augment",
    "class_fractions",
    "clip_hu",
    "default_phantom_spec",
    "generate_phantom",
    "generate_volume",
    "load_split",
    "load_validation",
    "percentile_normalize",
    "preprocess",
    "preprocess_split",
    "read_manifest",
    "read_volume",
    "resample_spacing",
    "resampled_dims",
    "sample_batch",
    "save_split",
    "write_manifest",
    "write_volume",
]
