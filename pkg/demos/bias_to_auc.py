"""
How a group-specific bias changes a group comparison
====================================================

Two groups of ellipsoids are built so that group L is larger than group H
with an AUC of about 0.90. An unbiased method keeps that AUC. A method that
undersegments group L by 25% (and only group L) pulls it down to chance.
"""

import math

import numpy as np
from scipy import stats

from segbias.errorsim import calibrate_strength, perturb_all
from segbias.metrics import auc_from_groups, volume_bias
from segbias.phantom import CohortSpec, PhantomSpec, generate_cohort
from segbias.volume import label_volume

jitter = 0.05
# H scale chosen so that log-volume separation gives AUC 0.90
effect = math.exp(-stats.norm.ppf(0.9) * math.sqrt(2) * jitter)
cohort = generate_cohort(PhantomSpec(kind="ellipsoid"),
                         CohortSpec(n_per_group=25, effect=effect, jitter=jitter, jitter_mode="quantile"))
h = [s.reference for s in cohort.group("H")]
low = [s.reference for s in cohort.group("L")]


def auc(h_maps, l_maps):
    return auc_from_groups([label_volume(m, 1) for m in l_maps], [label_volume(m, 1) for m in h_maps])


print(f"reference AUC           {auc(h, low):.3f}")
h_pred = perturb_all(h, "random-balanced", 0.3, 1)
l_pred = perturb_all(low, "random-balanced", 0.3, 2)
print(f"unbiased method         {auc(h_pred, l_pred):.3f}")

p = calibrate_strength(low, "systematic-erode", -0.25, seed=3)
l_eroded = perturb_all(low, "systematic-erode", p, 3)
bias = np.median([volume_bias(q, r, 1) for q, r in zip(l_eroded, low)])
print(f"L eroded (median {bias:+.3f}) {auc(h_pred, l_eroded):.3f}")
