"""Cross-resolution operators.

Conventions shared by every function here:

* voxel ``i`` along an axis has its center at ``(i + 0.5) * voxel_size``;
  source and target fields of view share the origin corner, so a factor of
  1 is an exact identity;
* a scale factor is ``source_voxel_size / target_voxel_size`` per axis
  (factor 2 halves the voxel size and doubles the grid);
* output dims are ``round_half_away(dims * factor)``, at least 1.

Intensities use separable linear interpolation with clamp-to-edge. Labels use
majority voting over the source voxels whose centers fall inside the target
voxel; ties go to the lowest label id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import sparse

from segbias.errors import GeometryMismatchError, ValidationError
from segbias.volume import LabelMap, VoxelGeometry, VoxelGrid

FACTOR_BOUNDS = (1 / 8, 8.0)

# float guard for source centers that sit exactly on a target voxel boundary
_BOUNDARY_EPS = 1e-9


@dataclass(frozen=True)
class ScaleFactor:
    """Per-axis ratio ``source_voxel_size / target_voxel_size``."""

    factors: tuple[float, ...]
    bounds: tuple[float, float] = field(default=FACTOR_BOUNDS, compare=False)

    def __post_init__(self):
        factors = tuple(float(f) for f in self.factors)
        lo, hi = self.bounds
        if not factors:
            raise ValidationError("scale factor needs at least one axis")
        for f in factors:
            if not math.isfinite(f) or f <= 0:
                raise ValidationError(f"scale factor components must be finite and > 0, got {factors}")
            if not lo <= f <= hi:
                raise ValidationError(f"scale factor {f} outside bounds [{lo}, {hi}]")
        object.__setattr__(self, "factors", factors)

    @classmethod
    def of(cls, value: Union[float, Sequence[float], "ScaleFactor"], ndim: int) -> ScaleFactor:
        if isinstance(value, ScaleFactor):
            f = value.factors
            if len(f) == 1:
                return cls(f * ndim, value.bounds)
            if len(f) != ndim:
                raise ValidationError(f"scale factor has {len(f)} axes, grid has {ndim}")
            return value
        if np.isscalar(value):
            return cls((float(value),) * ndim)
        value = tuple(value)
        if len(value) != ndim:
            raise ValidationError(f"scale factor has {len(value)} axes, grid has {ndim}")
        return cls(value)

    @property
    def is_identity(self) -> bool:
        return all(f == 1.0 for f in self.factors)

    def inverse(self) -> ScaleFactor:
        return ScaleFactor(tuple(1.0 / f for f in self.factors), self.bounds)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Log-uniform random rescaling in ``[min_factor, max_factor]``.

    The default range spans the largest resolution ratio of interest (1.4)
    symmetrically in log space.
    """

    min_factor: float = 0.7
    max_factor: float = 1.43
    isotropic: bool = True
    law: str = "log-uniform"

    def __post_init__(self):
        if not (0 < self.min_factor <= self.max_factor) or not math.isfinite(self.max_factor):
            raise ValidationError(f"need 0 < min_factor <= max_factor, got [{self.min_factor}, {self.max_factor}]")
        if self.law != "log-uniform":
            raise ValidationError(f"unsupported sampling law {self.law!r}")


Target = Union[VoxelGeometry, ScaleFactor, float, Sequence[float]]


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def scaled_geometry(geom: VoxelGeometry, factor) -> VoxelGeometry:
    """Geometry after rescaling by ``factor`` (dims rounded, voxel size divided)."""
    factor = ScaleFactor.of(factor, geom.ndim)
    dims = tuple(max(1, round_half_away(d * f)) for d, f in zip(geom.dims, factor.factors))
    vs = tuple(v / f for v, f in zip(geom.voxel_size, factor.factors))
    return VoxelGeometry(dims, vs)


def geometry_for_voxel_size(geom: VoxelGeometry, voxel_mm: float | Sequence[float]) -> VoxelGeometry:
    """Target geometry with the requested voxel size, covering the same field of view."""
    if np.isscalar(voxel_mm):
        voxel_mm = (float(voxel_mm),) * geom.ndim
    voxel_mm = tuple(float(v) for v in voxel_mm)
    if len(voxel_mm) != geom.ndim or any(not v > 0 for v in voxel_mm):
        raise ValidationError(f"invalid target voxel size {voxel_mm}")
    dims = tuple(max(1, round_half_away(d * v / t)) for d, v, t in zip(geom.dims, geom.voxel_size, voxel_mm))
    return VoxelGeometry(dims, voxel_mm)


def _target_geometry(source: VoxelGeometry, target: Target) -> VoxelGeometry:
    if isinstance(target, VoxelGeometry):
        if target.ndim != source.ndim:
            raise GeometryMismatchError(f"target has {target.ndim} axes, source has {source.ndim}")
        return target
    return scaled_geometry(source, target)


# ---------------------------------------------------------------------------
# intensity
# ---------------------------------------------------------------------------

def _linear_axis_weights(n_src: int, vs_src: float, n_dst: int, vs_dst: float):
    """Lower neighbour, upper neighbour and weight for each target voxel."""
    u = (np.arange(n_dst) + 0.5) * (vs_dst / vs_src) - 0.5
    u = np.clip(u, 0.0, n_src - 1)
    i0 = np.floor(u).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, u - i0


def _interp_stack(stack: np.ndarray, src: VoxelGeometry, dst: VoxelGeometry) -> np.ndarray:
    out = stack.astype(np.float64, copy=False)
    for axis in range(src.ndim):
        if src.dims[axis] == dst.dims[axis] and src.voxel_size[axis] == dst.voxel_size[axis]:
            continue
        i0, i1, w = _linear_axis_weights(src.dims[axis], src.voxel_size[axis], dst.dims[axis], dst.voxel_size[axis])
        ax = axis + 1
        shape = [1] * out.ndim
        shape[ax] = -1
        lo = np.take(out, i0, axis=ax)
        hi = np.take(out, i1, axis=ax)
        # a + w*(b - a) keeps constant regions exactly constant
        out = lo + w.reshape(shape) * (hi - lo)
    return out


def resample_intensity(g: VoxelGrid, target: Target) -> VoxelGrid:
    """Linear (bi-/trilinear) resampling of an image or feature stack.

    ``target`` is either a full :class:`VoxelGeometry` or a scale factor
    (scalar, per-axis sequence or :class:`ScaleFactor`). Float32 input stays
    float32; anything else comes back as float64.
    """
    dst = _target_geometry(g.geometry, target)
    if dst == g.geometry:
        return g
    stack = g.channel_stack()
    out = _interp_stack(stack, g.geometry, dst)
    # linear weights are convex; clip away last-ulp excursions
    out = np.clip(out, stack.min(), stack.max())
    out = out.astype(np.float32 if g.data.dtype == np.float32 else np.float64)
    if g.channels == 1:
        out = out[0]
    return VoxelGrid(out, dst)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

def _footprint_matrix(n_src: int, vs_src: float, n_dst: int, vs_dst: float) -> sparse.csr_matrix:
    """Sparse (n_dst, n_src) 0/1 matrix: which source voxels vote for each target voxel.

    A source voxel votes where its center lands (half-open target intervals).
    Target voxels that contain no source center fall back to the source voxel
    under their own center (nearest neighbour).
    """
    src_idx = np.arange(n_src)
    owner = np.floor((src_idx + 0.5) * (vs_src / vs_dst) + _BOUNDARY_EPS).astype(np.intp)
    keep = owner < n_dst
    rows, cols = owner[keep], src_idx[keep]
    empty = np.setdiff1d(np.arange(n_dst), rows)
    if empty.size:
        nearest = np.clip(np.floor((empty + 0.5) * (vs_dst / vs_src)).astype(np.intp), 0, n_src - 1)
        rows = np.concatenate([rows, empty])
        cols = np.concatenate([cols, nearest])
    vals = np.ones(rows.size, dtype=np.float64)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_dst, n_src))


def _apply_along(arr: np.ndarray, mat: sparse.csr_matrix, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0)
    rest = moved.shape[1:]
    out = mat @ moved.reshape(moved.shape[0], -1)
    return np.moveaxis(np.asarray(out).reshape((mat.shape[0],) + rest), 0, axis)


def footprint_counts(mask: np.ndarray, src: VoxelGeometry, dst: VoxelGeometry) -> np.ndarray:
    """Number of voting source voxels inside ``mask`` for every target voxel."""
    counts = mask.astype(np.float64)
    for axis in range(src.ndim):
        mat = _footprint_matrix(src.dims[axis], src.voxel_size[axis], dst.dims[axis], dst.voxel_size[axis])
        counts = _apply_along(counts, mat, axis)
    return np.rint(counts).astype(np.int64)


def resample_labels_majority(m: LabelMap, target: Target) -> LabelMap:
    """Majority-vote label resampling; lowest label id wins ties.

    Lossy by design: thin structures that never hold the majority of a
    coarse voxel disappear.
    """
    dst = _target_geometry(m.geometry, target)
    if dst == m.geometry:
        return m
    present = np.unique(m.labels)
    best_count = np.full(dst.dims, -1, dtype=np.int64)
    best_label = np.zeros(dst.dims, dtype=m.labels.dtype)
    for lab in present:  # ascending, so strict '>' keeps the lowest id on ties
        counts = footprint_counts(m.labels == lab, m.geometry, dst)
        better = counts > best_count
        best_count[better] = counts[better]
        best_label[better] = lab
    return LabelMap(best_label, dst, m.label_table)


# ---------------------------------------------------------------------------
# network-style rescaling and augmentation
# ---------------------------------------------------------------------------

def vinn_rescale(f: VoxelGrid, factor) -> VoxelGrid:
    """Rescale a feature stack to an internal resolution, channel by channel.

    Stand-alone counterpart of an interpolation step placed inside a network's
    first scale transition: linear interpolation, output dims
    ``round(dims * factor)``.
    """
    factor = ScaleFactor.of(factor, f.geometry.ndim)
    return resample_intensity(f, factor)


def sample_scale_factor(policy: AugmentationPolicy, seed: int, ndim: int = 3) -> ScaleFactor:
    """Draw one log-uniform scale factor; deterministic for a given seed."""
    lo, hi = policy.min_factor, policy.max_factor
    if lo == hi:
        return ScaleFactor((lo,) * ndim, (min(lo, FACTOR_BOUNDS[0]), max(hi, FACTOR_BOUNDS[1])))
    rng = np.random.default_rng(seed)
    n = 1 if policy.isotropic else ndim
    draws = np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))
    draws = np.clip(draws, lo, hi)
    if policy.isotropic:
        draws = np.repeat(draws, ndim)
    return ScaleFactor(tuple(draws.tolist()), (min(lo, FACTOR_BOUNDS[0]), max(hi, FACTOR_BOUNDS[1])))


def apply_scale_augmentation(image: VoxelGrid, labels: LabelMap, factor) -> tuple[VoxelGrid, LabelMap]:
    """Rescale an image/label pair to one shared target geometry."""
    if image.geometry != labels.geometry:
        raise GeometryMismatchError("image and labels must share a geometry")
    dst = scaled_geometry(image.geometry, factor)
    return resample_intensity(image, dst), resample_labels_majority(labels, dst)
