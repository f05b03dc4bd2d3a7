"""Random vs. systematic segmentation errors and downsampling-induced loss.

Three error models act on the boundary of each structure:

``random-balanced``
    ``k ~ Binomial(min(|inner|, |outer|), p)``; remove ``k`` random inner
    boundary voxels and add ``k`` random outer boundary voxels. The volume is
    preserved exactly, so any Dice loss carries no volume bias.
``systematic-dilate``
    every outer boundary voxel joins the structure with probability ``p``.
``systematic-erode``
    every inner boundary voxel leaves the structure with probability ``p``.

Boundaries use face connectivity (6 neighbours in 3D, 4 in 2D). The outer
boundary only takes background voxels; eroded voxels become background.

For a fixed seed the draws are coupled across ``p``: raising ``p`` only adds
changed voxels. Volume bias and Dice are therefore monotone in ``p``, which
the calibration routines rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from segbias.errors import ValidationError
from segbias.metrics import dsc, volume_bias
from segbias.resample import geometry_for_voxel_size, resample_labels_majority
from segbias.volume import LabelMap, label_volume

KINDS = ("random-balanced", "systematic-dilate", "systematic-erode")


@dataclass(frozen=True)
class ErrorModel:
    kind: str
    p: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown error model {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"error strength p must be in [0, 1], got {self.p}")


def boundaries(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inner and outer face-connected boundaries of a binary mask.

    Voxels on the grid edge count as inner boundary (outside the grid is
    background).
    """
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    inner = mask & ~ndimage.binary_erosion(mask, structure, border_value=0)
    outer = ndimage.binary_dilation(mask, structure) & ~mask
    return inner, outer


def _perturb_label(labels: np.ndarray, lab: int, kind: str, p: float, rng: np.random.Generator) -> None:
    mask = labels == lab
    inner, outer = boundaries(mask)
    outer &= labels == 0
    inner_idx = np.flatnonzero(inner)
    outer_idx = np.flatnonzero(outer)
    flat = labels.reshape(-1)
    if kind == "random-balanced":
        n = min(inner_idx.size, outer_idx.size)
        k = int(np.count_nonzero(rng.random(n) < p))
        remove = rng.permutation(inner_idx)[:k]
        add = rng.permutation(outer_idx)[:k]
        flat[remove] = 0
        flat[add] = lab
    elif kind == "systematic-dilate":
        flat[outer_idx[rng.random(outer_idx.size) < p]] = lab
    else:
        flat[inner_idx[rng.random(inner_idx.size) < p]] = 0


def perturb(m: LabelMap, model: ErrorModel) -> LabelMap:
    """Apply ``model`` to every foreground label, in ascending id order."""
    present = [int(x) for x in np.unique(m.labels) if x != 0]
    if not present:
        raise ValidationError("cannot perturb a map without foreground")
    if model.p == 0.0:
        return m
    labels = np.array(m.labels, copy=True)
    rng = np.random.default_rng(model.seed)
    for lab in present:
        _perturb_label(labels, lab, model.kind, model.p, rng)
    return m.with_labels(labels)


def subject_seed(seed: int, index: int) -> int:
    """Independent per-subject seed derived from a cohort seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def perturb_all(refs: Sequence[LabelMap], kind: str, p: float, seed: int) -> list[LabelMap]:
    return [perturb(r, ErrorModel(kind, p, subject_seed(seed, i))) for i, r in enumerate(refs)]


def error_stats(refs: Sequence[LabelMap], kind: str, p: float, seed: int, label: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject (DSC, volume bias) for one error model over a cohort."""
    preds = perturb_all(refs, kind, p, seed)
    d = np.array([dsc(q, r, label) for q, r in zip(preds, refs)])
    b = np.array([volume_bias(q, r, label) for q, r in zip(preds, refs)])
    return d, b


def downsampling_bias_curve(m: LabelMap, resolutions: Sequence[float], label: int = 1) -> list[tuple[float, float]]:
    """Structure volume after majority-vote downsampling to each resolution (mm).

    The first entry is always the native resolution and volume; a leading
    native entry in ``resolutions`` is not repeated.
    """
    resolutions = [float(r) for r in resolutions]
    native = max(m.geometry.voxel_size)
    if not resolutions or any(not math.isfinite(r) or r < native - 1e-9 for r in resolutions):
        raise ValidationError(f"resolutions must be non-empty and >= native {native} mm, got {resolutions}")
    out = [(native, label_volume(m, label))]
    for i, r in enumerate(resolutions):
        if i == 0 and r == native:
            continue
        down = resample_labels_majority(m, geometry_for_voxel_size(m.geometry, r))
        out.append((r, label_volume(down, label)))
    return out


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def calibrate_strength(refs: Sequence[LabelMap], kind: str, target_bias: float, seed: int,
                       label: int = 1, iters: int = 40) -> float:
    """Smallest-error ``p`` whose median volume bias matches ``target_bias`` (bisection)."""
    if kind == "random-balanced":
        raise ValidationError("random-balanced errors carry no volume bias to calibrate")
    sign = 1.0 if kind == "systematic-dilate" else -1.0
    if target_bias * sign < 0:
        raise ValidationError(f"{kind} cannot produce a bias of sign {target_bias:+}")
    lo, hi = 0.0, 1.0
    best, best_err = 0.0, math.inf
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        med = float(np.median(error_stats(refs, kind, mid, seed, label)[1]))
        err = abs(med - target_bias)
        if err < best_err:
            best, best_err = mid, err
        if med * sign < target_bias * sign:
            lo = mid
        else:
            hi = mid
    return best


@dataclass(frozen=True)
class Calibration:
    """A (random, dilate) strength pair with matched Dice but different bias."""

    p_random: float
    p_dilate: float
    dsc_random: float
    dsc_dilate: float
    median_bias_random: float
    median_bias_dilate: float
    found: bool

    @property
    def dsc_gap(self) -> float:
        return abs(self.dsc_random - self.dsc_dilate)

    @property
    def bias_gap(self) -> float:
        return abs(self.median_bias_dilate - self.median_bias_random)


def calibrate_dichotomy(refs: Sequence[LabelMap], seed: int, label: int = 1,
                        p_random_grid: Sequence[float] = (0.1, 0.15, 0.2, 0.3, 0.4, 0.5),
                        dsc_tol: float = 0.02, min_bias_gap: float = 0.10, iters: int = 30) -> Calibration:
    """Find strengths where random and dilation errors agree on mean Dice only.

    For each candidate random strength, bisect the dilation strength until
    the mean Dice values meet, then accept the first pair whose median volume
    biases differ by more than ``min_bias_gap``. ``found`` is False if no
    candidate qualifies (the closest pair is returned).
    """
    fallback = None
    for pr in p_random_grid:
        d_r, b_r = error_stats(refs, "random-balanced", pr, seed, label)
        target = float(d_r.mean())
        lo, hi = 0.0, 1.0
        best = None
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            d_d, b_d = error_stats(refs, "systematic-dilate", mid, seed + 1, label)
            gap = abs(float(d_d.mean()) - target)
            if best is None or gap < best[0]:
                best = (gap, mid, float(d_d.mean()), float(np.median(b_d)))
            if d_d.mean() > target:
                lo = mid
            else:
                hi = mid
        gap, pd, dsc_d, bias_d = best
        cal = Calibration(pr, pd, target, dsc_d, float(np.median(b_r)), bias_d, False)
        ok = cal.dsc_gap < dsc_tol and cal.bias_gap > min_bias_gap
        if ok:
            return replace(cal, found=True)
        if fallback is None or cal.dsc_gap < fallback.dsc_gap:
            fallback = cal
    return fallback
