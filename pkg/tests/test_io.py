import gzip
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segbias import LabelMap, VoxelGeometry, VoxelGrid, load_volume, save_volume
from segbias.errors import ValidationError, VolumeFormatError

CODES = {np.dtype("u1"): 2, np.dtype("i2"): 4, np.dtype("i4"): 8, np.dtype("f4"): 16, np.dtype("f8"): 64}


def make_nifti(data, pixdim=(1.0, 1.0, 1.0), endian="<", srow=None, sform_code=None,
               slope=0.0, inter=0.0, datatype=None, magic=b"n+1\x00"):
    """Single-file NIfTI-1 bytes packed at the public header byte offsets."""
    data = np.asarray(data)
    hdr = bytearray(352)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    code = datatype if datatype is not None else CODES[data.dtype]
    struct.pack_into(endian + "hh", hdr, 70, code, data.dtype.itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, *[1.0] * (7 - len(pixdim)))
    struct.pack_into(endian + "fff", hdr, 108, 352.0, slope, inter)
    if srow is not None:
        struct.pack_into(endian + "hh", hdr, 252, 0, 1 if sform_code is None else sform_code)
        for k, row in enumerate(srow):
            struct.pack_into(endian + "4f", hdr, 280 + 16 * k, *row)
    hdr[344:348] = magic
    body = data.astype(data.dtype.newbyteorder(endian)).tobytes(order="F")
    return bytes(hdr) + body


def test_handcrafted_header_isotropic(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    path = tmp_path / "a.nii"
    path.write_bytes(make_nifti(data))
    g = load_volume(path)
    assert g.geometry.voxel_size == (1.0, 1.0, 1.0)
    assert g.geometry.dims == (2, 3, 4)
    np.testing.assert_array_equal(g.data, data)
    assert g.data.dtype == np.int16


def test_big_endian_and_gzip(tmp_path):
    data = np.random.default_rng(0).random((3, 2, 2)).astype(np.float32)
    path = tmp_path / "b.nii.gz"
    path.write_bytes(gzip.compress(make_nifti(data, (1.5, 2.0, 2.5), endian=">")))
    g = load_volume(path)
    np.testing.assert_array_equal(g.data, data)
    assert g.geometry.voxel_size == (1.5, 2.0, 2.5)


def test_flipped_and_permuted_affine_reoriented_to_ras(tmp_path):
    data = np.arange(24, dtype=np.int32).reshape(2, 3, 4)
    # data axis 0 -> world y, axis 1 -> world -x, axis 2 -> world z
    srow = [(0.0, -2.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 3.0, 0.0)]
    path = tmp_path / "c.nii"
    path.write_bytes(make_nifti(data, (1.0, 2.0, 3.0), srow=srow))
    g = load_volume(path)
    expected = np.transpose(np.flip(data, axis=1), (1, 0, 2))
    np.testing.assert_array_equal(g.data, expected)
    assert g.geometry.voxel_size == (2.0, 1.0, 3.0)


def test_oblique_affine_rejected(tmp_path):
    c, s = np.cos(0.2), np.sin(0.2)
    srow = [(c, -s, 0, 0), (s, c, 0, 0), (0, 0, 1, 0)]
    path = tmp_path / "d.nii"
    path.write_bytes(make_nifti(np.zeros((2, 2, 2), np.uint8), srow=srow))
    with pytest.raises(VolumeFormatError, match="oblique"):
        load_volume(path)


def test_near_axis_aligned_affine_accepted(tmp_path):
    srow = [(1.0, 5e-4, 0, 0), (0, 1.0, 0, 0), (0, 0, 1.0, 0)]
    path = tmp_path / "e.nii"
    path.write_bytes(make_nifti(np.zeros((2, 2, 2), np.uint8), srow=srow))
    assert load_volume(path).geometry.dims == (2, 2, 2)


def test_scaling_applied_for_intensity_rejected_for_labels(tmp_path):
    data = np.array([[[1, 2], [3, 4]]], dtype=np.int16)
    path = tmp_path / "f.nii"
    path.write_bytes(make_nifti(data, slope=2.0, inter=1.0))
    np.testing.assert_array_equal(load_volume(path).data, data * 2.0 + 1.0)
    with pytest.raises(VolumeFormatError):
        load_volume(path, kind="label")


def test_non_integral_label_rejected(tmp_path):
    path = tmp_path / "g.nii"
    path.write_bytes(make_nifti(np.array([[[0.0, 2.5]]], dtype=np.float32)))
    with pytest.raises(VolumeFormatError, match="non-integral"):
        load_volume(path, kind="label")


def test_nearly_integral_float_labels_accepted(tmp_path):
    path = tmp_path / "h.nii"
    path.write_bytes(make_nifti(np.array([[[0.0, 2.0000001]]], dtype=np.float64)))
    m = load_volume(path, kind="label")
    np.testing.assert_array_equal(m.labels, [[[0, 2]]])


@pytest.mark.parametrize("kwargs, match", [
    ({"datatype": 512}, "datatype"),
    ({"magic": b"abcd"}, "magic"),
])
def test_malformed_headers(tmp_path, kwargs, match):
    path = tmp_path / "bad.nii"
    path.write_bytes(make_nifti(np.zeros((2, 2, 2), np.uint8), **kwargs))
    with pytest.raises(VolumeFormatError, match=match):
        load_volume(path)


def test_truncated_and_garbage_files(tmp_path):
    path = tmp_path / "t.nii"
    path.write_bytes(make_nifti(np.zeros((4, 4, 4), np.float32))[:400])
    with pytest.raises(VolumeFormatError):
        load_volume(path)
    path.write_bytes(b"x" * 100)
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_missing_file_and_unwritable_destination(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.nii")
    m = LabelMap.from_array(np.zeros((3, 3, 3), np.uint8))
    with pytest.raises(OSError):
        save_volume(m, tmp_path / "no" / "such" / "dir" / "x.nii")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        save_volume(m, blocker / "x.nii")


def test_labelmap_round_trip_3x3x3(tmp_path):
    m = LabelMap.from_array(np.arange(27).reshape(3, 3, 3) % 4, 1.0)
    for name in ("m.nii", "m.nii.gz", "m.json"):
        save_volume(m, tmp_path / name)
        assert load_volume(tmp_path / name, kind="label") == m


def test_simplevol_keeps_label_names(tmp_path):
    m = LabelMap.from_array(np.array([[0, 1], [2, 1]], np.uint8), (1.0, 2.0), {1: "cortex", 2: "wm"})
    save_volume(m, tmp_path / "m.json")
    back = load_volume(tmp_path / "m.json", kind="label")
    assert back.label_table == {0: "background", 1: "cortex", 2: "wm"}


def test_simplevol_layout_is_documented_order(tmp_path):
    data = np.arange(2 * 3 * 4, dtype=np.int16).reshape(2, 3, 4)
    save_volume(VoxelGrid.from_array(data, 1.0), tmp_path / "v.json")
    meta = json.loads((tmp_path / "v.json").read_text())
    assert meta["dims"] == [2, 3, 4] and meta["dtype"] == "int16" and meta["channels"] == 1
    raw = (tmp_path / meta["data_file"]).read_bytes()
    assert np.frombuffer(raw, "<i2").tolist() == list(range(24))  # z fastest


def test_intensity_round_trip_across_formats(tmp_path):
    g = VoxelGrid.from_array(np.random.default_rng(1).normal(size=(4, 5, 3)).astype(np.float32), (1.0, 1.4, 2.0))
    save_volume(g, tmp_path / "g.json")
    save_volume(load_volume(tmp_path / "g.json"), tmp_path / "g.nii")
    assert load_volume(tmp_path / "g.nii") == g


def test_repeated_gzip_writes_identical(tmp_path):
    g = VoxelGrid.from_array(np.ones((3, 3, 3), np.float32))
    save_volume(g, tmp_path / "a.nii.gz")
    first = (tmp_path / "a.nii.gz").read_bytes()
    save_volume(g, tmp_path / "a.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == first


def test_unknown_suffix_and_kind(tmp_path):
    g = VoxelGrid.from_array(np.ones((2, 2, 2), np.float32))
    with pytest.raises(ValidationError):
        save_volume(g, tmp_path / "x.mha")
    with pytest.raises(ValidationError):
        load_volume(tmp_path / "x.nii", kind="mask")


dtypes = st.sampled_from(["uint8", "int16", "int32", "float32", "float64"])
shapes = st.lists(st.integers(1, 5), min_size=2, max_size=3).map(tuple)
sizes = st.integers(250, 4000).map(lambda v: v / 1000)


@st.composite
def grids(draw):
    dtype = np.dtype(draw(dtypes))
    shape = draw(shapes)
    channels = draw(st.sampled_from([1, 1, 2]))
    if dtype.kind == "f":
        elements = st.floats(-1e6, 1e6, width=dtype.itemsize * 8, allow_nan=False)
    else:
        info = np.iinfo(dtype)
        elements = st.integers(int(info.min), int(info.max))
    full = shape if channels == 1 else (channels,) + shape
    data = draw(arrays(dtype, full, elements=elements))
    vs = tuple(draw(sizes) for _ in shape)
    return VoxelGrid(data, VoxelGeometry(shape, vs))


@settings(max_examples=60, deadline=None)
@given(grids(), st.sampled_from(["x.nii", "x.nii.gz", "x.json"]))
def test_round_trip_property(tmp_path_factory, grid, name):
    path = tmp_path_factory.mktemp("rt") / name
    save_volume(grid, path)
    assert load_volume(path) == grid


@settings(max_examples=40, deadline=None)
@given(arrays(np.int32, shapes, elements=st.integers(0, 1000)), st.sampled_from(["x.nii.gz", "x.json"]))
def test_label_round_trip_property(tmp_path_factory, labels, name):
    m = LabelMap.from_array(labels, 1.0)
    path = tmp_path_factory.mktemp("rtl") / name
    save_volume(m, path)
    assert load_volume(path, kind="label") == m
