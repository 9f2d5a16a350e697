"""Multi-label semantic segmentation of multispectral photoacoustic and ultrasound images."""

from .core import (
    ConfigurationError,
    DatasetSplit,
    FormatError,
    LabelMap,
    LoadError,
    PasegError,
    Sample,
    SampleMeta,
    SpectralCube,
    TissueClass,
    UsImage,
    WavelengthAxis,
    read_manifest,
    read_tensor_file,
    split_by_volunteer,
    write_tensor_file,
)

__all__ = [
    "ConfigurationError", "DatasetSplit", "FormatError", "LabelMap", "LoadError", "PasegError",
    "Sample", "SampleMeta", "SpectralCube", "TissueClass", "UsImage", "WavelengthAxis",
    "read_manifest", "read_tensor_file", "split_by_volunteer", "write_tensor_file",
]

__version__ = "0.1.0"
