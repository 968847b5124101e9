"""Longitudinal diffeomorphic registration of 3D image time series.

The library recovers the deformations relating every pair of sessions in a
series by optimizing the stationary velocity fields between consecutive
sessions, scored with a scale-invariant local similarity metric, and ships a
synthetic-data generator plus evaluation metrics for validating recovery
against known ground truth.
"""

from .config import RegistrationConfig, StageSpec
from .grid import GridSpec, ImageSeries, Mask, VectorField, Volume

__all__ = [
    "GridSpec",
    "ImageSeries",
    "Mask",
    "RegistrationConfig",
    "StageSpec",
    "VectorField",
    "Volume",
]
__version__ = "0.1.0"
