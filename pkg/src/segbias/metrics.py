"""Overlap, volume bias, group summaries and threshold-free group AUC.

Record CSV columns, in this order::

    subject_id, group, label, dsc, volume_pred_mm3, volume_ref_mm3, volume_bias

Floats are written with ``repr`` so a CSV round trip is lossless.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from segbias.errors import ValidationError
from segbias.volume import LabelMap, label_volume, require_same_geometry

CSV_COLUMNS = ("subject_id", "group", "label", "dsc", "volume_pred_mm3", "volume_ref_mm3", "volume_bias")


def _check_label(m: LabelMap, label: int, role: str) -> None:
    if int(label) not in m.label_table:
        raise ValidationError(f"label {label} unknown to the {role} label table")


def dsc(pred: LabelMap, ref: LabelMap, label: int) -> float:
    """Dice overlap ``2|A & B| / (|A| + |B|)`` of one label; 1.0 if both are empty.

    Both maps must share a geometry. Resample explicitly beforehand if they do
    not; nothing is resampled here.
    """
    require_same_geometry(pred.geometry, ref.geometry, "prediction and reference")
    _check_label(pred, label, "prediction")
    _check_label(ref, label, "reference")
    a = pred.labels == label
    b = ref.labels == label
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def volume_bias(pred: LabelMap, ref: LabelMap, label: int) -> float:
    """Normalized signed volume error ``(V_pred - V_ref) / V_ref``.

    Physical volumes are compared, so the maps may have different geometries.
    Positive means oversegmentation, negative undersegmentation.
    """
    v_ref = label_volume(ref, label)
    if v_ref <= 0:
        raise ValidationError(f"reference structure {label} is empty; volume bias undefined")
    v_pred = label_volume(pred, label) if int(label) in pred.label_table else 0.0
    return (v_pred - v_ref) / v_ref


@dataclass(frozen=True)
class SubjectMetrics:
    subject_id: str
    group: str
    label: int
    dsc: float
    volume_pred_mm3: float
    volume_ref_mm3: float
    volume_bias: float

    def row(self) -> list[str]:
        return [self.subject_id, self.group, str(self.label), repr(float(self.dsc)),
                repr(float(self.volume_pred_mm3)), repr(float(self.volume_ref_mm3)), repr(float(self.volume_bias))]


def subject_metrics(subject_id: str, group: str, pred: LabelMap, ref: LabelMap, label: int,
                    pred_for_dsc: LabelMap | None = None) -> SubjectMetrics:
    """One record. ``pred_for_dsc`` is the prediction already in reference space,
    if it had to be resampled for the overlap computation."""
    overlap_pred = pred if pred_for_dsc is None else pred_for_dsc
    v_pred = label_volume(pred, label) if int(label) in pred.label_table else 0.0
    return SubjectMetrics(
        subject_id=subject_id, group=group, label=int(label),
        dsc=dsc(overlap_pred, ref, label),
        volume_pred_mm3=v_pred, volume_ref_mm3=label_volume(ref, label),
        volume_bias=volume_bias(pred, ref, label),
    )


def write_records_csv(records: Iterable[SubjectMetrics], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(r.row())


def records_to_csv(records: Iterable[SubjectMetrics]) -> str:
    buf = io.StringIO()
    write_records_csv(records, buf)
    return buf.getvalue()


def read_records_csv(fh) -> list[SubjectMetrics]:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValidationError(f"unexpected CSV columns {reader.fieldnames}; expected {list(CSV_COLUMNS)}")
    return [
        SubjectMetrics(row["subject_id"], row["group"], int(row["label"]), float(row["dsc"]),
                       float(row["volume_pred_mm3"]), float(row["volume_ref_mm3"]), float(row["volume_bias"]))
        for row in reader
    ]


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------

def auc_from_groups(positive: Sequence[float], negative: Sequence[float]) -> float:
    """P(random positive > random negative) with ties counted one half.

    Computed from mid-ranks (Mann-Whitney U), which equals trapezoidal
    integration of the empirical ROC over every threshold.
    """
    pos = np.asarray(positive, dtype=float)
    neg = np.asarray(negative, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("AUC needs at least one positive and one negative value")
    ranks = stats.rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def roc_auc(values: Iterable[tuple[float, bool]]) -> float:
    """AUC for ``(volume, is_positive)`` pairs."""
    values = list(values)
    pos = [v for v, p in values if p]
    neg = [v for v, p in values if not p]
    return auc_from_groups(pos, neg)


# ---------------------------------------------------------------------------
# group summaries
# ---------------------------------------------------------------------------

def mad(x: Sequence[float]) -> float:
    """Unscaled median absolute deviation."""
    x = np.asarray(x, dtype=float)
    return float(np.median(np.abs(x - np.median(x))))


@dataclass(frozen=True)
class VolumeDistribution:
    median: float
    mad: float
    other_median: float
    other_mad: float
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]
    other_counts: tuple[int, ...]
    separation: float
    separation_saturated: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bin_edges"] = list(self.bin_edges)
        d["counts"] = list(self.counts)
        d["other_counts"] = list(self.other_counts)
        if math.isinf(self.separation):
            d["separation"] = None
        return d


def shared_bin_edges(*samples: Sequence[float]) -> np.ndarray:
    """Freedman-Diaconis bins on the pooled sample; one bin if the spread is zero."""
    pooled = np.concatenate([np.asarray(s, dtype=float) for s in samples])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        return np.array([lo - 0.5, hi + 0.5])
    q1, q3 = np.percentile(pooled, [25, 75])
    if q3 == q1:
        return np.array([lo, hi])
    return np.histogram_bin_edges(pooled, bins="fd")


def distribution_summary(volumes: Sequence[float], other_group_volumes: Sequence[float]) -> VolumeDistribution:
    """Median, MAD and shared-bin histogram of a group plus its mode separation.

    The separation score is ``|median_a - median_b| / pooled_mad`` with
    ``pooled_mad = sqrt((mad_a**2 + mad_b**2) / 2)``. When both MADs are zero
    and the medians differ, the score is ``inf`` and ``separation_saturated`` is
    set.
    """
    a = np.asarray(volumes, dtype=float)
    b = np.asarray(other_group_volumes, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValidationError("distribution summary needs at least 2 volumes per group")
    med_a, med_b = float(np.median(a)), float(np.median(b))
    mad_a, mad_b = mad(a), mad(b)
    pooled = math.sqrt((mad_a ** 2 + mad_b ** 2) / 2)
    diff = abs(med_a - med_b)
    saturated = False
    if pooled > 0:
        sep = diff / pooled
    elif diff == 0:
        sep = 0.0
    else:
        sep, saturated = math.inf, True
    edges = shared_bin_edges(a, b)
    counts, _ = np.histogram(a, edges)
    other, _ = np.histogram(b, edges)
    return VolumeDistribution(
        median=med_a, mad=mad_a, other_median=med_b, other_mad=mad_b,
        bin_edges=tuple(float(e) for e in edges), counts=tuple(int(c) for c in counts),
        other_counts=tuple(int(c) for c in other), separation=sep, separation_saturated=saturated,
    )


@dataclass(frozen=True)
class GroupSummary:
    group: str
    label: int
    n: int
    median_bias: float
    bias_q1: float
    bias_q3: float
    dsc_mean: float
    dsc_sd: float
    median_volume_pred_mm3: float
    median_volume_ref_mm3: float
    volume: VolumeDistribution | None = None

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "volume"}
        d["volume"] = self.volume.to_dict() if self.volume is not None else None
        return d


def _single_label(records: Sequence[SubjectMetrics], label: int | None) -> int:
    labels = sorted({r.label for r in records})
    if label is not None:
        return int(label)
    if len(labels) != 1:
        raise ValidationError(f"records hold labels {labels}; pick one")
    return labels[0]


def group_bias(records: Sequence[SubjectMetrics], group: str, label: int | None = None) -> GroupSummary:
    """Summarize one group: the median volume bias is the group's expected bias.

    Records of other groups are used only for the volume-distribution
    comparison, which is filled in when both sides have at least 2 subjects.
    """
    records = list(records)
    label = _single_label(records, label)
    mine = [r for r in records if r.group == group and r.label == label]
    if not mine:
        raise ValidationError(f"no records for group {group!r}, label {label}")
    others = [r for r in records if r.group != group and r.label == label]
    bias = np.array([r.volume_bias for r in mine])
    dscs = np.array([r.dsc for r in mine])
    q1, q3 = np.percentile(bias, [25, 75])
    vol = None
    if len(mine) >= 2 and len(others) >= 2:
        vol = distribution_summary([r.volume_pred_mm3 for r in mine], [r.volume_pred_mm3 for r in others])
    return GroupSummary(
        group=group, label=label, n=len(mine),
        median_bias=float(np.median(bias)), bias_q1=float(q1), bias_q3=float(q3),
        dsc_mean=float(dscs.mean()), dsc_sd=float(dscs.std(ddof=1)) if len(mine) > 1 else 0.0,
        median_volume_pred_mm3=float(np.median([r.volume_pred_mm3 for r in mine])),
        median_volume_ref_mm3=float(np.median([r.volume_ref_mm3 for r in mine])),
        volume=vol,
    )
