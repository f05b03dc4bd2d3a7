"""Voxel grids, label maps and physical volumes.

Arrays are indexed in (x, y, z) order (or (x, y) in 2D) and stored C-contiguous.
Multi-channel grids put the channel axis first: ``(channels, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from segbias.errors import GeometryMismatchError, ValidationError


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VoxelGeometry:
    """Grid shape plus voxel size in millimetres, one entry per axis."""

    dims: tuple[int, ...]
    voxel_size: tuple[float, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if np.isscalar(self.voxel_size):
            vs = (float(self.voxel_size),) * len(dims)
        else:
            vs = tuple(float(v) for v in self.voxel_size)
        if len(dims) not in (2, 3):
            raise ValidationError(f"geometry must have 2 or 3 axes, got {len(dims)}")
        if len(vs) != len(dims):
            raise ValidationError(f"voxel_size has {len(vs)} entries for {len(dims)} axes")
        if any(d < 1 for d in dims):
            raise ValidationError(f"dims must be >= 1, got {dims}")
        if not all(np.isfinite(v) and v > 0 for v in vs):
            raise ValidationError(f"voxel_size must be finite and > 0, got {vs}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)

    @classmethod
    def isotropic(cls, dims: Sequence[int], voxel_mm: float) -> VoxelGeometry:
        return cls(tuple(dims), (float(voxel_mm),) * len(dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        """mm^3 per voxel (mm^2 for 2D grids)."""
        return float(np.prod(self.voxel_size))

    @property
    def extent(self) -> tuple[float, ...]:
        """Physical field of view per axis, ``dims * voxel_size``."""
        return tuple(d * v for d, v in zip(self.dims, self.voxel_size))

    @property
    def physical_volume(self) -> float:
        return self.n_voxels * self.voxel_volume

    def centers(self, axis: int) -> np.ndarray:
        """Voxel-center coordinates (mm) along one axis, origin at the grid corner."""
        return (np.arange(self.dims[axis]) + 0.5) * self.voxel_size[axis]


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Real-valued image or feature stack on a :class:`VoxelGeometry`.

    ``data`` has shape ``geometry.dims`` for single-channel images and
    ``(channels, *geometry.dims)`` for feature stacks.
    """

    data: np.ndarray
    geometry: VoxelGeometry

    def __post_init__(self):
        data = np.asarray(self.data)
        dims = self.geometry.dims
        if data.shape != dims and data.shape[1:] != dims:
            raise GeometryMismatchError(f"data shape {data.shape} does not fit dims {dims}")
        if data.ndim == len(dims) + 1 and data.shape[0] < 1:
            raise ValidationError("feature stack must have at least one channel")
        if data.dtype.kind not in "iuf":
            raise ValidationError(f"unsupported image dtype {data.dtype}")
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise ValidationError("image contains NaN or Inf")
        object.__setattr__(self, "data", _readonly(data))

    @classmethod
    def from_array(cls, data, voxel_size: float | Sequence[float] = 1.0, channels_first: bool = False) -> VoxelGrid:
        data = np.asarray(data)
        dims = data.shape[1:] if channels_first else data.shape
        if np.isscalar(voxel_size):
            voxel_size = (float(voxel_size),) * len(dims)
        return cls(data, VoxelGeometry(dims, voxel_size))

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == self.geometry.ndim else self.data.shape[0]

    def channel_stack(self) -> np.ndarray:
        """Data as ``(channels, *dims)`` regardless of how it is stored."""
        return self.data[None] if self.data.ndim == self.geometry.ndim else self.data

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


def _default_table(labels: np.ndarray) -> dict[int, str]:
    table = {0: "background"}
    for lab in np.unique(labels):
        lab = int(lab)
        if lab != 0:
            table[lab] = f"label_{lab}"
    return table


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Hard segmentation: one non-negative integer label per voxel.

    ``label_table`` maps every known id to a name; 0 is always background.
    When omitted it is built from the labels present.
    """

    labels: np.ndarray
    geometry: VoxelGeometry
    label_table: Mapping[int, str] = field(default=None)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.geometry.dims:
            raise GeometryMismatchError(f"label shape {labels.shape} does not match dims {self.geometry.dims}")
        if labels.dtype == bool:
            labels = labels.astype(np.uint8)
        if labels.dtype.kind not in "iu":
            raise ValidationError(f"labels must be integers, got dtype {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise ValidationError("labels must be non-negative")
        if self.label_table is None:
            table = _default_table(labels)
        else:
            table = {int(k): str(v) for k, v in dict(self.label_table).items()}
            table.setdefault(0, "background")
            unknown = set(np.unique(labels).tolist()) - set(table)
            if unknown:
                raise ValidationError(f"labels {sorted(unknown)} missing from label_table")
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "label_table", dict(sorted(table.items())))

    @classmethod
    def from_array(cls, labels, voxel_size: float | Sequence[float] = 1.0, label_table=None) -> LabelMap:
        labels = np.asarray(labels)
        if np.isscalar(voxel_size):
            voxel_size = (float(voxel_size),) * labels.ndim
        return cls(labels, VoxelGeometry(labels.shape, voxel_size), label_table)

    def with_labels(self, labels: np.ndarray) -> LabelMap:
        """Same geometry and table, new label array."""
        return LabelMap(labels, self.geometry, self.label_table)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.geometry == other.geometry and bool(np.array_equal(self.labels, other.labels))

    __hash__ = None


def label_volume(m: LabelMap, label: int) -> float:
    """Physical volume of one label: voxel count times voxel volume (mm^3, or mm^2 in 2D)."""
    label = int(label)
    if label not in m.label_table:
        raise ValidationError(f"unknown label id {label}")
    return int(np.count_nonzero(m.labels == label)) * m.geometry.voxel_volume


def require_same_geometry(a: VoxelGeometry, b: VoxelGeometry, what: str = "inputs") -> None:
    if a != b:
        raise GeometryMismatchError(f"{what} differ in geometry: {a} vs {b}")
