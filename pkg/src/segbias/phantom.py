"""Synthetic two-group cohorts with known structure volumes.

Two structure kinds are available:

``ellipsoid``
    a compact blob (ellipse in 2D); per-subject scale multiplies every radius.
``ribbon``
    a sinusoidally folded sheet. The last axis is the height axis; the sheet
    spans the other axes inside an inset, and a voxel belongs to it when
    ``|z - z0 - A sin(2 pi x / wavelength + phase)| <= thickness / 2``.
    Per-subject scale multiplies the thickness, so the exact volume is
    ``thickness * footprint area`` whatever the fold.

A voxel is foreground iff its center lies inside the analytic shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from segbias.errors import ValidationError
from segbias.io import load_volume, save_volume
from segbias.resample import geometry_for_voxel_size, resample_intensity, resample_labels_majority
from segbias.volume import LabelMap, VoxelGeometry, VoxelGrid, label_volume

STRUCTURE_LABEL = 1
GROUPS = ("H", "L")
SPLITS = ("train", "val", "test")
MANIFEST_FORMAT = "segbias-cohort"


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "ribbon"
    geometry: VoxelGeometry = field(default_factory=lambda: VoxelGeometry.isotropic((48, 48, 24), 1.0))
    radii: tuple[float, ...] = (8.0, 6.0, 6.0)
    thickness: float = 2.0
    wavelength: float = 10.0
    amplitude: float = 3.0
    inset: float = 4.0
    foreground_mean: float = 110.0
    background_mean: float = 30.0
    noise_sigma: float = 10.0

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "ribbon"):
            raise ValidationError(f"unknown structure kind {self.kind!r}")
        if self.kind == "ellipsoid" and (len(self.radii) != self.geometry.ndim or min(self.radii) <= 0):
            raise ValidationError(f"need {self.geometry.ndim} positive radii, got {self.radii}")
        if self.thickness <= 0 or self.wavelength <= 0 or self.amplitude < 0 or self.inset < 0:
            raise ValidationError("ribbon thickness/wavelength must be > 0, amplitude/inset >= 0")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        self.check_fits(1.0)

    def check_fits(self, scale: float) -> None:
        """Raise unless the structure at ``scale`` keeps a one-voxel margin."""
        ext, vs = self.geometry.extent, self.geometry.voxel_size
        if self.kind == "ellipsoid":
            # center may be jittered by half a voxel
            for r, e, v in zip(self.radii, ext, vs):
                if r * scale + 0.5 * v > e / 2 - v:
                    raise ValidationError(f"ellipsoid radius {r * scale:.3g} mm exceeds the grid")
        else:
            half = self.amplitude + self.thickness * scale / 2 + 0.5 * vs[-1]
            if half > ext[-1] / 2 - vs[-1]:
                raise ValidationError(f"ribbon half-height {half:.3g} mm exceeds the grid")
            for e, v in zip(ext[:-1], vs[:-1]):
                if self.inset < v or 2 * self.inset >= e:
                    raise ValidationError("ribbon inset must leave a margin and a non-empty footprint")

    def analytic_volume(self, scale: float = 1.0) -> float:
        if self.kind == "ellipsoid":
            r = [x * scale for x in self.radii]
            return math.pi * r[0] * r[1] if len(r) == 2 else 4.0 / 3.0 * math.pi * r[0] * r[1] * r[2]
        area = 1.0
        for e in self.geometry.extent[:-1]:
            area *= e - 2 * self.inset
        return self.thickness * scale * area

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = {"dims": list(self.geometry.dims), "voxel_size": list(self.geometry.voxel_size)}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> PhantomSpec:
        d = dict(d)
        if "geometry" in d and not isinstance(d["geometry"], VoxelGeometry):
            g = d["geometry"]
            d["geometry"] = VoxelGeometry(tuple(g["dims"]), tuple(g["voxel_size"]))
        if "radii" in d:
            d["radii"] = tuple(d["radii"])
        return cls(**d)


@dataclass(frozen=True)
class CohortSpec:
    """Group sizes, group effect and splits.

    ``effect`` is the ratio of group H to group L structure scale (L has scale
    1). Per-subject scales are ``group_scale * exp(jitter * z)``; with
    ``jitter_mode="quantile"`` the z are evenly spaced normal quantiles
    (shuffled), which pins group statistics close to their nominal values.
    """

    n_per_group: int = 10
    effect: float = 1.3
    jitter: float = 0.05
    split: tuple[float, float, float] = (5 / 9, 1 / 9, 1 / 3)
    seed: int = 0
    jitter_mode: str = "random"

    def __post_init__(self):
        if self.n_per_group < 1:
            raise ValidationError("n_per_group must be >= 1")
        if not self.effect > 0 or self.jitter < 0:
            raise ValidationError("effect must be > 0 and jitter >= 0")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must be 3 non-negative values summing to 1, got {self.split}")
        if self.jitter_mode not in ("random", "quantile"):
            raise ValidationError(f"unknown jitter_mode {self.jitter_mode!r}")
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))

    def to_dict(self) -> dict:
        return asdict(self) | {"split": list(self.split)}


@dataclass(frozen=True)
class Subject:
    id: str
    group: str
    image: VoxelGrid | None
    reference: LabelMap
    prediction: LabelMap | None = None
    native_voxel_size: tuple[float, ...] = ()
    analytic_volume: float | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValidationError(f"group must be one of {GROUPS}, got {self.group!r}")
        if self.image is not None and self.image.geometry != self.reference.geometry:
            raise ValidationError(f"subject {self.id}: image and reference geometry differ")
        if not self.native_voxel_size:
            object.__setattr__(self, "native_voxel_size", self.reference.geometry.voxel_size)

    @property
    def reference_volume(self) -> float:
        return label_volume(self.reference, STRUCTURE_LABEL)


@dataclass(frozen=True)
class Cohort:
    subjects: tuple[Subject, ...]
    splits: Mapping[str, str]
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subject ids")
        missing = set(ids) - set(self.splits)
        if missing:
            raise ValidationError(f"no split for subjects {sorted(missing)}")

    def group(self, g: str) -> list[Subject]:
        return [s for s in self.subjects if s.group == g]

    def in_split(self, split: str) -> list[Subject]:
        return [s for s in self.subjects if self.splits[s.id] == split]

    def by_id(self, sid: str) -> Subject:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(sid)


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------

def _center_grids(geom: VoxelGeometry) -> list[np.ndarray]:
    return np.meshgrid(*[geom.centers(a) for a in range(geom.ndim)], indexing="ij", sparse=True)


def voxelize_ellipsoid(geom: VoxelGeometry, radii: Sequence[float], center: Sequence[float] | None = None) -> np.ndarray:
    if center is None:
        center = [e / 2 for e in geom.extent]
    acc = 0.0
    for c, x, r in zip(center, _center_grids(geom), radii):
        acc = acc + ((x - c) / r) ** 2
    return np.broadcast_to(acc <= 1.0, geom.dims).copy()


def voxelize_ribbon(geom: VoxelGeometry, thickness: float, wavelength: float, amplitude: float,
                    inset: float, phase: float = 0.0, offset: float = 0.0) -> np.ndarray:
    axes = _center_grids(geom)
    ext = geom.extent
    z0 = ext[-1] / 2 + offset
    surface = z0 + amplitude * np.sin(2 * np.pi * axes[0] / wavelength + phase)
    inside = np.abs(axes[-1] - surface) <= thickness / 2
    for a in range(geom.ndim - 1):
        inside = inside & (axes[a] >= inset) & (axes[a] <= ext[a] - inset)
    return np.broadcast_to(inside, geom.dims).copy()


def make_subject_arrays(pspec: PhantomSpec, scale: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Voxelized mask and noisy float32 image for one subject."""
    geom = pspec.geometry
    pspec.check_fits(scale)
    if pspec.kind == "ellipsoid":
        jitter = rng.uniform(-0.5, 0.5, size=geom.ndim) * np.asarray(geom.voxel_size)
        center = [e / 2 + j for e, j in zip(geom.extent, jitter)]
        mask = voxelize_ellipsoid(geom, [r * scale for r in pspec.radii], center)
    else:
        phase = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(-0.5, 0.5) * geom.voxel_size[-1]
        mask = voxelize_ribbon(geom, pspec.thickness * scale, pspec.wavelength, pspec.amplitude, pspec.inset,
                               phase, offset)
    image = np.where(mask, pspec.foreground_mean, pspec.background_mean)
    image = image + rng.normal(0.0, pspec.noise_sigma, size=geom.dims) if pspec.noise_sigma else image
    return mask, image.astype(np.float32)


# ---------------------------------------------------------------------------
# cohorts
# ---------------------------------------------------------------------------

def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; earlier splits win ties."""
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    left = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def assign_splits(ids_by_group: Mapping[str, Sequence[str]], fractions: Sequence[float], seed: int) -> dict[str, str]:
    """Shuffle each group with ``seed`` and cut it by ``fractions`` (balanced per group)."""
    splits = {}
    for k, g in enumerate(sorted(ids_by_group)):
        ids = sorted(ids_by_group[g])
        rng = np.random.default_rng([seed, 1_000_003, k])
        perm = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for name, c in zip(SPLITS, split_counts(len(ids), fractions)):
            for sid in perm[start:start + c]:
                splits[sid] = name
            start += c
    return splits


def _subject_scales(cspec: CohortSpec, group_index: int) -> np.ndarray:
    base = cspec.effect if GROUPS[group_index] == "H" else 1.0
    n = cspec.n_per_group
    rng = np.random.default_rng([cspec.seed, 7919, group_index])
    if cspec.jitter_mode == "quantile":
        z = rng.permutation(stats.norm.ppf((np.arange(n) + 0.5) / n))
    else:
        z = rng.standard_normal(n)
    return base * np.exp(cspec.jitter * z)


def generate_cohort(pspec: PhantomSpec, cspec: CohortSpec) -> Cohort:
    """Build ``2 * n_per_group`` subjects (H first, then L) with ids ``sub-000``...

    Every subject draws from its own generator seeded by (cohort seed, index),
    so the cohort is reproducible and subjects could be built in any order.
    """
    subjects = []
    k = 0
    for gi, group in enumerate(GROUPS):
        for scale in _subject_scales(cspec, gi):
            rng = np.random.default_rng([cspec.seed, k])
            mask, image = make_subject_arrays(pspec, float(scale), rng)
            sid = f"sub-{k:03d}"
            geom = pspec.geometry
            ref = LabelMap(mask.astype(np.uint8), geom, {0: "background", STRUCTURE_LABEL: "structure"})
            subjects.append(Subject(
                id=sid, group=group, image=VoxelGrid(image, geom), reference=ref,
                analytic_volume=pspec.analytic_volume(float(scale)), scale=float(scale),
            ))
            k += 1
    ids_by_group = {g: [s.id for s in subjects if s.group == g] for g in GROUPS}
    splits = assign_splits(ids_by_group, cspec.split, cspec.seed)
    return Cohort(tuple(subjects), splits, {"phantom": pspec.to_dict(), "cohort": cspec.to_dict()})


def stratify_by_volume(subjects, n: int, volume: Callable | None = None):
    """Pick the ``n`` smallest and ``n`` largest subjects by reference volume.

    ``subjects`` is a sequence of :class:`Subject` or a mapping ``id -> volume``
    (then ids are returned). Ordering is by ``(volume, id)``, so ties at the
    cut go to the lower id on the small side and the higher id on the large
    side. The large group is returned largest first.
    """
    if isinstance(subjects, Mapping):
        items = [(float(v), str(k), k) for k, v in subjects.items()]
    else:
        volume = volume or (lambda s: s.reference_volume)
        items = [(float(volume(s)), s.id, s) for s in subjects]
    if n < 0 or 2 * n > len(items):
        raise ValidationError(f"need at least {2 * n} subjects to stratify, have {len(items)}")
    items.sort(key=lambda t: (t[0], t[1]))
    small = [t[2] for t in items[:n]]
    large = [t[2] for t in items[len(items) - n:]][::-1]
    return small, large


def assign_group_resolutions(cohort: Cohort, pair: tuple[float, float]) -> Cohort:
    """Put group H at the high and group L at the low resolution of ``pair`` (mm).

    Subjects already at their target voxel size are left untouched; the
    others have image and reference resampled (linear / majority vote).
    """
    high, low = (float(p) for p in pair)
    if not (0 < high <= low) or not math.isfinite(low):
        raise ValidationError(f"resolution pair must satisfy 0 < high <= low, got {pair}")
    out = []
    for s in cohort.subjects:
        mm = high if s.group == "H" else low
        geom = s.reference.geometry
        if all(v == mm for v in geom.voxel_size):
            out.append(replace(s, native_voxel_size=geom.voxel_size))
            continue
        dst = geometry_for_voxel_size(geom, mm)
        image = resample_intensity(s.image, dst) if s.image is not None else None
        if image is not None and image.data.dtype != np.float32:
            image = VoxelGrid(image.data.astype(np.float32), dst)
        out.append(replace(s, image=image, reference=resample_labels_majority(s.reference, dst),
                           native_voxel_size=dst.voxel_size))
    meta = dict(cohort.meta) | {"resolution_pair": [high, low]}
    return Cohort(tuple(out), dict(cohort.splits), meta)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_cohort(cohort: Cohort, out_dir, suffix: str = ".nii.gz") -> Path:
    """Write images, references, predictions and ``cohort.json`` under ``out_dir``.

    Manifest paths are relative to the manifest's directory.
    """
    out_dir = Path(out_dir)
    for sub in ("images", "labels", "predictions"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in sorted(cohort.subjects, key=lambda s: s.id):
        entry = {
            "id": s.id,
            "group": s.group,
            "split": cohort.splits[s.id],
            "native_voxel_size": list(s.native_voxel_size),
            "reference": f"labels/{s.id}{suffix}",
            "image": None,
            "prediction": None,
            "analytic_volume": s.analytic_volume,
            "scale": s.scale,
        }
        save_volume(s.reference, out_dir / entry["reference"])
        if s.image is not None:
            entry["image"] = f"images/{s.id}{suffix}"
            save_volume(s.image, out_dir / entry["image"])
        if s.prediction is not None:
            entry["prediction"] = f"predictions/{s.id}{suffix}"
            save_volume(s.prediction, out_dir / entry["prediction"])
        entries.append(entry)
    manifest = {"format": MANIFEST_FORMAT, "version": 1, "meta": dict(cohort.meta), "subjects": entries}
    path = out_dir / "cohort.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cohort manifest {path} is not valid JSON: {exc}") from None
    if manifest.get("format") != MANIFEST_FORMAT or not isinstance(manifest.get("subjects"), list):
        raise ValidationError(f"{path} is not a segbias cohort manifest")
    for e in manifest["subjects"]:
        for key in ("id", "group", "split", "reference"):
            if key not in e:
                raise ValidationError(f"manifest entry lacks {key!r}: {e}")
    return manifest


def load_cohort(path, load_images: bool = True) -> Cohort:
    path = Path(path)
    manifest = read_manifest(path)
    base = path.parent
    subjects, splits = [], {}
    for e in manifest["subjects"]:
        ref = load_volume(base / e["reference"], kind="label")
        image = load_volume(base / e["image"]) if load_images and e.get("image") else None
        pred = load_volume(base / e["prediction"], kind="label") if e.get("prediction") else None
        subjects.append(Subject(
            id=e["id"], group=e["group"], image=image, reference=ref, prediction=pred,
            native_voxel_size=tuple(e.get("native_voxel_size") or ref.geometry.voxel_size),
            analytic_volume=e.get("analytic_volume"), scale=e.get("scale", 1.0),
        ))
        splits[e["id"]] = e["split"]
    return Cohort(tuple(subjects), splits, manifest.get("meta", {}))
