import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segbias import LabelMap, VoxelGeometry, VoxelGrid
from segbias.errors import GeometryMismatchError, ValidationError
from segbias.resample import (
    AugmentationPolicy,
    ScaleFactor,
    apply_scale_augmentation,
    geometry_for_voxel_size,
    resample_intensity,
    resample_labels_majority,
    round_half_away,
    sample_scale_factor,
    scaled_geometry,
    vinn_rescale,
)
from segbias.volume import label_volume


# --- brute-force majority oracle (exact rational arithmetic, explicit loops) ---

def _axis_members(n_src, vs_src, n_dst, vs_dst):
    vs_src, vs_dst = Fraction(vs_src), Fraction(vs_dst)
    members = []
    for j in range(n_dst):
        lo, hi = j * vs_dst, (j + 1) * vs_dst
        inside = [i for i in range(n_src) if lo <= (i + Fraction(1, 2)) * vs_src < hi]
        if not inside:
            c = (j + Fraction(1, 2)) * vs_dst
            inside = [min(n_src - 1, max(0, math.floor(c / vs_src)))]
        members.append(inside)
    return members


def majority_oracle(labels, src_vs, dst_dims, dst_vs):
    members = [_axis_members(n, a, m, b) for n, a, m, b in zip(labels.shape, src_vs, dst_dims, dst_vs)]
    out = np.zeros(dst_dims, dtype=labels.dtype)
    for idx in itertools.product(*[range(d) for d in dst_dims]):
        votes = {}
        for src in itertools.product(*[members[a][idx[a]] for a in range(len(idx))]):
            lab = int(labels[src])
            votes[lab] = votes.get(lab, 0) + 1
        top = max(votes.values())
        out[idx] = min(lab for lab, c in votes.items() if c == top)
    return out


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, 2.49)] == [1, 2, 3, -1, 2]


def test_scaled_geometry_dims_and_sizes():
    g = VoxelGeometry((10, 7, 5), (1.0, 1.0, 2.0))
    s = scaled_geometry(g, 0.5)
    assert s.dims == (5, 4, 3)  # 3.5 -> 4, 2.5 -> 3
    assert s.voxel_size == (2.0, 2.0, 4.0)
    assert scaled_geometry(g, 1 / 8).dims == (1, 1, 1)
    assert geometry_for_voxel_size(g, 2.0).dims == (5, 4, 5)


@pytest.mark.parametrize("bad", [0.0, -1.0, 9.0, 0.1, math.inf, math.nan])
def test_scale_factor_bounds(bad):
    with pytest.raises(ValidationError):
        ScaleFactor.of(bad, 3)


def test_scale_factor_axes_must_match():
    with pytest.raises(ValidationError):
        ScaleFactor.of((1.0, 2.0), 3)
    assert ScaleFactor.of(2.0, 3).inverse().factors == (0.5, 0.5, 0.5)


def test_identity_returns_input_unchanged():
    g = VoxelGrid.from_array(np.random.default_rng(0).random((4, 5, 6)))
    assert resample_intensity(g, 1.0) is g
    m = LabelMap.from_array(np.random.default_rng(0).integers(0, 3, (4, 5, 6)))
    assert resample_labels_majority(m, 1.0) is m


def test_ramp_downsampled_by_two_averages_pairs():
    data = np.arange(8, dtype=np.float64)[:, None, None] * np.ones((1, 2, 2))
    out = resample_intensity(VoxelGrid.from_array(data), (0.5, 1.0, 1.0))
    # target centers at 1, 3, 5, 7 in source-voxel units -> midway between pairs
    np.testing.assert_allclose(out.data[:, 0, 0], [0.5, 2.5, 4.5, 6.5])


def test_upsampling_clamps_at_edges():
    data = np.array([0.0, 10.0])[:, None]
    out = resample_intensity(VoxelGrid.from_array(data * np.ones((1, 1))), (2.0, 1.0))
    np.testing.assert_allclose(out.data[:, 0], [0.0, 2.5, 7.5, 10.0])


def test_float32_preserved_integers_promoted():
    f32 = VoxelGrid.from_array(np.ones((4, 4), np.float32))
    assert resample_intensity(f32, 2.0).data.dtype == np.float32
    i16 = VoxelGrid.from_array(np.ones((4, 4), np.int16))
    assert resample_intensity(i16, 2.0).data.dtype == np.float64


def test_feature_stack_resampled_per_channel():
    rng = np.random.default_rng(3)
    a, b = rng.random((6, 6, 6)), rng.random((6, 6, 6))
    stack = VoxelGrid.from_array(np.stack([a, b]), 1.0, channels_first=True)
    out = vinn_rescale(stack, 0.5)
    assert out.channels == 2 and out.geometry.dims == (3, 3, 3)
    np.testing.assert_allclose(out.data[1], resample_intensity(VoxelGrid.from_array(b), 0.5).data)


def test_vinn_rescale_round_trip_shape():
    f = VoxelGrid.from_array(np.zeros((3, 12, 12, 10), np.float32), 1.0, channels_first=True)
    down = vinn_rescale(f, 1 / 1.4)
    up = vinn_rescale(down, ScaleFactor.of(1.4, 3))
    assert down.geometry.dims == (9, 9, 7)
    assert up.geometry.dims == (13, 13, 10)


@st.composite
def linear_case(draw):
    ndim = draw(st.sampled_from([2, 3]))
    dims = tuple(draw(st.integers(2, 6)) for _ in range(ndim))
    vs = tuple(draw(st.sampled_from([0.5, 1.0, 1.5])) for _ in range(ndim))
    factor = tuple(draw(st.sampled_from([0.5, 0.7, 1.0, 1.4, 2.0, 3.0])) for _ in range(ndim))
    coef = draw(arrays(np.float64, ndim + 1, elements=st.floats(-5, 5)))
    return dims, vs, factor, coef


@settings(max_examples=80, deadline=None)
@given(linear_case())
def test_multilinear_exact_inside_source_hull(case):
    dims, vs, factor, coef = case
    geom = VoxelGeometry(dims, vs)
    grids = np.meshgrid(*[geom.centers(a) for a in range(len(dims))], indexing="ij")
    data = coef[0] + sum(c * g for c, g in zip(coef[1:], grids))
    out = resample_intensity(VoxelGrid.from_array(data, vs), factor)
    centers = [out.geometry.centers(a) for a in range(len(dims))]
    tgrids = np.meshgrid(*centers, indexing="ij")
    expected = coef[0] + sum(c * g for c, g in zip(coef[1:], tgrids))
    inside = np.ones(out.geometry.dims, bool)
    for a, g in enumerate(tgrids):
        src = geom.centers(a)
        inside &= (g >= src[0] - 1e-12) & (g <= src[-1] + 1e-12)
    np.testing.assert_allclose(out.data[inside], expected[inside], atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4)),
              elements=st.floats(-1e3, 1e3)),
       st.sampled_from([0.25, 0.5, 0.7, 1.4, 2.0, 3.0]))
def test_no_overshoot(data, factor):
    out = resample_intensity(VoxelGrid.from_array(data), factor)
    assert out.data.min() >= data.min() and out.data.max() <= data.max()


def test_majority_ties_lowest_label():
    labels = np.array([[2, 1], [1, 2]])
    out = resample_labels_majority(LabelMap.from_array(labels), 0.5)
    assert out.labels.tolist() == [[1]]
    out = resample_labels_majority(LabelMap.from_array(np.array([[3, 3], [0, 0]])), 0.5)
    assert out.labels.tolist() == [[0]]


def test_majority_counting_fixture():
    # 4x4 -> 2x2: each target voxel polls one 2x2 block
    labels = np.array([[1, 1, 0, 2],
                       [1, 0, 2, 2],
                       [0, 0, 3, 3],
                       [0, 1, 3, 1]])
    out = resample_labels_majority(LabelMap.from_array(labels), 0.5)
    assert out.labels.tolist() == [[1, 2], [0, 3]]


@st.composite
def label_case(draw):
    ndim = draw(st.sampled_from([2, 3]))
    dims = tuple(draw(st.integers(1, 6)) for _ in range(ndim))
    labels = draw(arrays(np.uint8, dims, elements=st.integers(0, 3)))
    vs = tuple(draw(st.sampled_from([0.5, 1.0, 1.25, 2.0])) for _ in range(ndim))
    target = tuple(draw(st.sampled_from([0.4, 0.5, 1.0, 1.4, 2.0, 3.0])) for _ in range(ndim))
    return labels, vs, target


@settings(max_examples=120, deadline=None)
@given(label_case())
def test_majority_matches_brute_force(case):
    labels, vs, target = case
    m = LabelMap.from_array(labels, vs, {i: str(i) for i in range(4)})
    dst = geometry_for_voxel_size(m.geometry, target)
    out = resample_labels_majority(m, dst)
    np.testing.assert_array_equal(out.labels, majority_oracle(labels, vs, dst.dims, dst.voxel_size))
    assert set(np.unique(out.labels)) <= set(np.unique(labels))


def test_thin_structure_vanishes_when_coarsened():
    labels = np.zeros((12, 12, 12), np.uint8)
    labels[:, :, 5] = 1  # 1-voxel sheet
    out = resample_labels_majority(LabelMap.from_array(labels, 1.0), 1 / 3)
    assert label_volume(out, 1) == 0.0


def test_target_ndim_mismatch():
    m = LabelMap.from_array(np.zeros((3, 3), np.uint8))
    with pytest.raises(GeometryMismatchError):
        resample_labels_majority(m, VoxelGeometry((2, 2, 2), 1.0))


# --- augmentation ---

def test_sampling_is_deterministic_and_log_uniform():
    policy = AugmentationPolicy()
    assert sample_scale_factor(policy, 7) == sample_scale_factor(policy, 7)
    draws = np.array([sample_scale_factor(policy, s).factors[0] for s in range(10_000)])
    assert draws.min() >= 0.7 and draws.max() <= 1.43
    centre = 0.5 * (math.log(0.7) + math.log(1.43))
    assert abs(np.median(np.log(draws)) - centre) < 0.05
    # log-uniform: each log-space half holds about half the mass
    assert abs(np.mean(np.log(draws) < centre) - 0.5) < 0.02


def test_degenerate_policy_returns_min():
    assert sample_scale_factor(AugmentationPolicy(1.2, 1.2), 3).factors == (1.2, 1.2, 1.2)


def test_anisotropic_policy_draws_per_axis():
    f = sample_scale_factor(AugmentationPolicy(isotropic=False), 1)
    assert len(set(f.factors)) == 3


@pytest.mark.parametrize("lo, hi", [(0.0, 1.0), (1.5, 1.0), (0.7, math.inf)])
def test_invalid_policy(lo, hi):
    with pytest.raises(ValidationError):
        AugmentationPolicy(lo, hi)


def test_augmentation_loses_thin_ribbon_volume():
    labels = np.zeros((16, 16, 16), np.uint8)
    labels[:, :, 7] = 1
    image = VoxelGrid.from_array(np.where(labels == 1, 110.0, 30.0).astype(np.float32))
    img2, lab2 = apply_scale_augmentation(image, LabelMap.from_array(labels), 0.5)
    assert img2.geometry == lab2.geometry
    assert label_volume(lab2, 1) < 0.5 * label_volume(LabelMap.from_array(labels), 1)


def test_augmentation_geometry_mismatch():
    with pytest.raises(GeometryMismatchError):
        apply_scale_augmentation(VoxelGrid.from_array(np.zeros((4, 4, 4))),
                                 LabelMap.from_array(np.zeros((4, 4, 5), np.uint8)), 0.5)
