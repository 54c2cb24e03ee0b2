"""Decadal prediction of Atlantic Multidecadal Variability states.

Gridded-field preprocessing, AMV index classification, persistence and
chance baselines, a numpy convolutional classifier and a lead-time sweep
harness, plus a synthetic ensemble generator for desk-scale runs.
"""

from amvpred.errors import (
    AmvError,
    ConfigError,
    DataError,
    DegenerateError,
    FormatError,
    IoError,
    MaskError,
    NumericError,
    RegionError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "AmvError",
    "ConfigError",
    "DataError",
    "DegenerateError",
    "FormatError",
    "IoError",
    "MaskError",
    "NumericError",
    "RegionError",
    "ShapeError",
]
