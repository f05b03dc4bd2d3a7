"""Auditing resolution-induced bias in volumetric segmentations.

The package is organised around a few small modules:

``segbias.volume``    grids, label maps and physical volumes
``segbias.io``        NIfTI-1 and SimpleVol readers/writers
``segbias.resample``  linear and majority-vote resampling, feature rescaling,
                      scale augmentation
``segbias.phantom``   synthetic two-group cohorts
``segbias.errorsim``  random vs. systematic segmentation error models
``segbias.metrics``   Dice, volume bias, group summaries, ROC AUC
``segbias.audit``     end-to-end audits and the error-simulation experiment
"""

from segbias.errors import (
    GeometryMismatchError,
    SegBiasError,
    ValidationError,
    VolumeFormatError,
)
from segbias.volume import LabelMap, VoxelGeometry, VoxelGrid, label_volume
from segbias.io import load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "GeometryMismatchError",
    "LabelMap",
    "SegBiasError",
    "ValidationError",
    "VolumeFormatError",
    "VoxelGeometry",
    "VoxelGrid",
    "label_volume",
    "load_volume",
    "save_volume",
    "__version__",
]
