"""End-to-end audits of prediction sources and the error-simulation experiment.

An audit reads a cohort manifest and one predicted label file per subject,
and writes

``metrics.csv``
    one row per (subject, label), columns as in :mod:`segbias.metrics`;
``summary.json``
    per-label group summaries, cross-group AUC on predicted and reference
    volumes, missing predictions and a provenance block.

Outputs contain no timestamps or absolute paths, so re-running a config
reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from segbias import __version__
from segbias.errors import GeometryMismatchError, ValidationError
from segbias.errorsim import calibrate_dichotomy, perturb_all
from segbias.io import load_volume
from segbias.metrics import (
    GroupSummary,
    SubjectMetrics,
    auc_from_groups,
    dsc,
    group_bias,
    records_to_csv,
    shared_bin_edges,
    subject_metrics,
    volume_bias,
)
from segbias.phantom import GROUPS, CohortSpec, PhantomSpec, generate_cohort, read_manifest
from segbias.resample import geometry_for_voxel_size, resample_labels_majority
from segbias.volume import LabelMap, label_volume

OUTPUT_DIR_ENV = "SEGBIAS_OUTPUT_DIR"
METRIC_SPACES = ("resample-to-reference", "native")


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, "segbias-out")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(materialized: dict) -> str:
    return hashlib.sha256(_canonical(materialized).encode()).hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


@dataclass(frozen=True)
class AuditConfig:
    """Audit settings; relative paths resolve against the manifest directory.

    ``predictions`` is a path pattern containing ``{subject_id}``; when it is
    None the manifest's own ``prediction`` entries are used.
    """

    manifest: str
    predictions: str | None = None
    labels: tuple[int, ...] = (1,)
    resolution_pair: tuple[float, float] | None = None
    metric_space: str = "resample-to-reference"
    output_dir: str | None = None
    seed: int = 0
    positive_group: str = "L"
    on_missing: str = "error"

    def __post_init__(self):
        labels = tuple(int(x) for x in self.labels)
        if not labels:
            raise ValidationError("labels must be non-empty")
        object.__setattr__(self, "labels", labels)
        if self.metric_space not in METRIC_SPACES:
            raise ValidationError(f"metric_space must be one of {METRIC_SPACES}")
        if self.positive_group not in GROUPS:
            raise ValidationError(f"positive_group must be one of {GROUPS}")
        if self.on_missing not in ("error", "skip"):
            raise ValidationError("on_missing must be 'error' or 'skip'")
        if self.predictions is not None and "{subject_id}" not in self.predictions:
            raise ValidationError("predictions pattern must contain '{subject_id}'")
        if self.resolution_pair is not None:
            pair = tuple(float(x) for x in self.resolution_pair)
            if len(pair) != 2 or not 0 < pair[0] <= pair[1]:
                raise ValidationError(f"resolution_pair must be (high, low) with 0 < high <= low, got {pair}")
            object.__setattr__(self, "resolution_pair", pair)
        if self.output_dir is None:
            object.__setattr__(self, "output_dir", default_output_dir())

    @classmethod
    def from_dict(cls, d: dict) -> AuditConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}; allowed: {sorted(known)}")
        if "manifest" not in d:
            raise ValidationError("config needs a 'manifest' entry")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> AuditConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    def materialized(self) -> dict:
        """Settings that determine the results; locations are left out so
        reruns from another directory or into another output folder match."""
        d = asdict(self)
        del d["output_dir"]
        d["manifest"] = Path(self.manifest).name
        d["labels"] = list(self.labels)
        d["resolution_pair"] = list(self.resolution_pair) if self.resolution_pair else None
        return d


@dataclass
class AuditReport:
    records: list[SubjectMetrics]
    groups: dict[int, dict[str, GroupSummary]]
    auc: dict[int, dict]
    missing_predictions: list[str]
    provenance: dict
    metric_space: str = "resample-to-reference"

    def summary(self) -> dict:
        return {
            "provenance": self.provenance,
            "metric_space": self.metric_space,
            "n_records": len(self.records),
            "missing_predictions": self.missing_predictions,
            "groups": {str(lab): {g: s.to_dict() for g, s in gs.items()} for lab, gs in self.groups.items()},
            "auc": {str(lab): v for lab, v in self.auc.items()},
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "metrics.csv", out_dir / "summary.json"
        csv_path.write_text(records_to_csv(self.records))
        _dump_json(self.summary(), json_path)
        return csv_path, json_path


def _with_labels(m: LabelMap, labels: Sequence[int]) -> LabelMap:
    table = dict(m.label_table)
    missing = [lab for lab in labels if lab not in table]
    if not missing:
        return m
    for lab in missing:
        table[lab] = f"label_{lab}"
    return LabelMap(m.labels, m.geometry, table)


def summarize(records: Sequence[SubjectMetrics], labels: Sequence[int], positive_group: str) -> tuple[dict, dict]:
    """Group summaries and cross-group AUCs from metric records alone."""
    groups, aucs = {}, {}
    for lab in labels:
        rec = [r for r in records if r.label == lab]
        present = sorted({r.group for r in rec})
        groups[lab] = {g: group_bias(rec, g, lab) for g in present}
        if len(present) == 2:
            pos = [r for r in rec if r.group == positive_group]
            neg = [r for r in rec if r.group != positive_group]
            aucs[lab] = {
                "positive_group": positive_group,
                "predicted": auc_from_groups([r.volume_pred_mm3 for r in pos], [r.volume_pred_mm3 for r in neg]),
                "reference": auc_from_groups([r.volume_ref_mm3 for r in pos], [r.volume_ref_mm3 for r in neg]),
            }
    return groups, aucs


def audit_subjects(items, labels: Sequence[int], metric_space: str) -> list[SubjectMetrics]:
    """Metric records for ``(subject_id, group, prediction, reference)`` tuples, sorted by id."""
    records = []
    for sid, group, pred, ref in sorted(items, key=lambda t: t[0]):
        pred = _with_labels(pred, labels)
        ref = _with_labels(ref, labels)
        overlap_pred = None
        if pred.geometry != ref.geometry:
            if metric_space == "native":
                raise GeometryMismatchError(
                    f"subject {sid}: prediction geometry {pred.geometry} differs from reference "
                    f"{ref.geometry} under metric_space='native'"
                )
            overlap_pred = resample_labels_majority(pred, ref.geometry)
        for lab in labels:
            records.append(subject_metrics(sid, group, pred, ref, lab, overlap_pred))
    return records


def run_audit(config: AuditConfig, write: bool = True) -> AuditReport:
    """Audit every cohort subject's prediction against its reference."""
    manifest_path = Path(config.manifest)
    manifest = read_manifest(manifest_path)
    base = manifest_path.parent
    items, missing = [], []
    for e in sorted(manifest["subjects"], key=lambda e: e["id"]):
        if config.predictions is not None:
            rel = config.predictions.format(subject_id=e["id"])
        else:
            rel = e.get("prediction")
        pred_path = (base / rel) if rel else None
        if pred_path is None or not pred_path.exists():
            missing.append(e["id"])
            continue
        ref = load_volume(base / e["reference"], kind="label")
        pred = load_volume(pred_path, kind="label")
        items.append((e["id"], e["group"], pred, ref))
    if missing and config.on_missing == "error":
        raise ValidationError(f"missing predictions for {len(missing)} subject(s): {', '.join(missing)}")
    records = audit_subjects(items, config.labels, config.metric_space)
    groups, aucs = summarize(records, config.labels, config.positive_group)
    materialized = config.materialized()
    provenance = {
        "toolkit": "segbias",
        "version": __version__,
        "seed": config.seed,
        "config": materialized,
        "config_hash": config_hash(materialized),
        "manifest_sha256": hashlib.sha256(manifest_path.read_bytes()).hexdigest(),
    }
    report = AuditReport(records, groups, aucs, missing, provenance, config.metric_space)
    if write:
        report.write(config.output_dir)
    return report


# ---------------------------------------------------------------------------
# random vs. systematic errors and downsampling on a phantom cohort
# ---------------------------------------------------------------------------

DEFAULT_ERROR_MODELS = ("random", "systematic", "downsampled-2mm", "downsampled-3mm")


def _model_resolution(name: str) -> float | None:
    if name.startswith("downsampled-") and name.endswith("mm"):
        try:
            return float(name[len("downsampled-"):-2])
        except ValueError:
            pass
    return None


@dataclass(frozen=True)
class ErrorExperimentConfig:
    """Settings for the random-vs-systematic error experiment.

    Models: ``random`` (volume-balanced), ``systematic`` (dilation),
    ``systematic-erode`` (erosion at the calibrated dilation strength) and
    ``downsampled-<r>mm`` (majority-vote downsampling of the reference).
    """

    phantom: dict = field(default_factory=dict)
    n_subjects: int = 20
    jitter: float = 0.05
    seed: int = 0
    models: tuple[str, ...] = DEFAULT_ERROR_MODELS
    dsc_tol: float = 0.02
    min_bias_gap: float = 0.10
    output_dir: str | None = None

    def __post_init__(self):
        if self.n_subjects < 2 or self.n_subjects % 2:
            raise ValidationError("n_subjects must be an even number >= 2")
        models = tuple(self.models)
        if not models:
            raise ValidationError("at least one model is required")
        for m in models:
            if m not in ("random", "systematic", "systematic-erode") and _model_resolution(m) is None:
                raise ValidationError(f"unknown model {m!r}")
        if len(set(models)) != len(models):
            raise ValidationError("duplicate models")
        object.__setattr__(self, "models", models)
        PhantomSpec.from_dict(self.phantom)
        if self.output_dir is None:
            object.__setattr__(self, "output_dir", default_output_dir())

    @classmethod
    def from_dict(cls, d: dict) -> ErrorExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}; allowed: {sorted(known)}")
        return cls(**d)

    def materialized(self) -> dict:
        d = asdict(self)
        del d["output_dir"]
        d["phantom"] = PhantomSpec.from_dict(self.phantom).to_dict()
        d["models"] = list(self.models)
        return d


@dataclass
class ErrorExperimentResult:
    rows: list[dict]
    histogram: list[dict]
    summary: dict


EXPERIMENT_COLUMNS = ("model", "subject_id", "p", "dsc", "volume_pred_mm3", "volume_ref_mm3", "volume_bias")
EXPERIMENT_HIST_COLUMNS = ("model", "bin_left", "bin_right", "count")


def run_error_experiment(config: ErrorExperimentConfig, write: bool = True) -> ErrorExperimentResult:
    """Volume, Dice and bias distributions for each configured error model.

    The random and dilation strengths come from :func:`calibrate_dichotomy`,
    so both models reach the same mean Dice.
    """
    pspec = PhantomSpec.from_dict(config.phantom)
    cohort = generate_cohort(pspec, CohortSpec(n_per_group=config.n_subjects // 2, effect=1.0,
                                               jitter=config.jitter, seed=config.seed))
    subjects = sorted(cohort.subjects, key=lambda s: s.id)
    refs = [s.reference for s in subjects]
    cal = calibrate_dichotomy(refs, config.seed, dsc_tol=config.dsc_tol, min_bias_gap=config.min_bias_gap)

    rows = []
    volumes = {"reference": [label_volume(r, 1) for r in refs]}
    per_model = {}
    for name in config.models:
        res = _model_resolution(name)
        if res is not None:
            p = None
            preds = [resample_labels_majority(r, geometry_for_voxel_size(r.geometry, res)) for r in refs]
            overlap = [resample_labels_majority(q, r.geometry) for q, r in zip(preds, refs)]
        else:
            kind, p = {
                "random": ("random-balanced", cal.p_random),
                "systematic": ("systematic-dilate", cal.p_dilate),
                "systematic-erode": ("systematic-erode", cal.p_dilate),
            }[name]
            # same seeds as calibration so the reported Dice matches it
            seed = config.seed if kind == "random-balanced" else config.seed + 1
            preds = perturb_all(refs, kind, p, seed)
            overlap = preds
        d = [dsc(o, r, 1) for o, r in zip(overlap, refs)]
        b = [volume_bias(q, r, 1) for q, r in zip(preds, refs)]
        v = [label_volume(q, 1) for q in preds]
        volumes[name] = v
        for s, di, vi, bi, r in zip(subjects, d, v, b, refs):
            rows.append({"model": name, "subject_id": s.id, "p": p, "dsc": di, "volume_pred_mm3": vi,
                         "volume_ref_mm3": label_volume(r, 1), "volume_bias": bi})
        per_model[name] = {
            "p": p,
            "mean_dsc": float(np.mean(d)),
            "median_volume_bias": float(np.median(b)),
            "bias_q1": float(np.percentile(b, 25)),
            "bias_q3": float(np.percentile(b, 75)),
            "median_volume_mm3": float(np.median(v)),
        }

    edges = shared_bin_edges(*volumes.values())
    hist = []
    for name, v in volumes.items():
        counts, _ = np.histogram(v, edges)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            hist.append({"model": name, "bin_left": float(lo), "bin_right": float(hi), "count": int(c)})

    materialized = config.materialized()
    summary = {
        "provenance": {"toolkit": "segbias", "version": __version__, "seed": config.seed,
                       "config": materialized, "config_hash": config_hash(materialized)},
        "calibration": asdict(cal) | {"dsc_gap": cal.dsc_gap, "bias_gap": cal.bias_gap},
        "models": per_model,
    }
    result = ErrorExperimentResult(rows, hist, summary)
    if write:
        write_error_experiment(result, config.output_dir)
    return result


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])


def write_error_experiment(result: ErrorExperimentResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_rows(out_dir / "error_records.csv", EXPERIMENT_COLUMNS, result.rows)
    _write_rows(out_dir / "error_histogram.csv", EXPERIMENT_HIST_COLUMNS, result.histogram)
    _dump_json(result.summary, out_dir / "error_summary.json")
