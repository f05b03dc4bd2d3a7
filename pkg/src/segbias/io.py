"""Reading and writing volumes: NIfTI-1 single files and SimpleVol.

NIfTI-1
    ``.nii`` or ``.nii.gz``. Datatypes uint8, int16, int32, float32 and float64
    are read in either byte order and written little-endian. The voxel-to-world
    affine (sform, else qform, else pixdim) must be an axis permutation/flip
    of RAS within 1e-3 per direction cosine; data are reoriented to RAS on
    load. Feature stacks are stored in the 5th dimension (``dim[5]``); a 2D
    stack carries ``intent_name = "2d"`` so its singleton z axis is dropped
    again on load. Voxel sizes are read back as the shortest decimal that
    matches the stored single-precision value.

SimpleVol
    A JSON header plus a raw little-endian payload::

        {"format": "simplevol", "version": 1, "kind": "intensity" | "label",
         "dims": [X, Y, Z], "voxel_size": [sx, sy, sz], "dtype": "float32",
         "channels": 1, "data_file": "name.raw",
         "label_table": {"0": "background", ...}}   # label files only

    The payload holds ``channels * X * Y * Z`` values in C order of the array
    shaped ``(channels, X, Y, Z)``: channel slowest, z fastest. ``data_file``
    is resolved relative to the header.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from pathlib import Path

import numpy as np

from segbias.errors import ValidationError, VolumeFormatError
from segbias.volume import LabelMap, VoxelGeometry, VoxelGrid

ORIENTATION_TOL = 1e-3
LABEL_INTEGRAL_TOL = 1e-6

# NIfTI datatype code -> numpy dtype (native byte order resolved at read time)
NIFTI_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
NIFTI_CODES = {np.dtype(v).str[1:]: k for k, v in NIFTI_DTYPES.items()}
SIMPLEVOL_DTYPES = ("uint8", "int16", "int32", "float32", "float64")

# (name, struct code) in header order; 348 bytes in total
_HEADER_FIELDS = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"),
    ("qoffset_x", "f"), ("qoffset_y", "f"), ("qoffset_z", "f"),
    ("srow_x", "4f"), ("srow_y", "4f"), ("srow_z", "4f"),
    ("intent_name", "16s"), ("magic", "4s"),
]
_HEADER_FMT = "".join(code for _, code in _HEADER_FIELDS)
assert struct.calcsize("<" + _HEADER_FMT) == 348


def _is_gz(path: Path) -> bool:
    return path.name.endswith(".gz")


def _format_of(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if name.endswith(".json"):
        return "simplevol"
    raise ValidationError(f"cannot infer format from file name {path.name!r}")


# ---------------------------------------------------------------------------
# NIfTI-1 header
# ---------------------------------------------------------------------------

def parse_nifti_header(raw: bytes) -> tuple[dict, str]:
    """Decode a 348-byte NIfTI-1 header; returns (fields, byte order '<' or '>')."""
    if len(raw) < 348:
        raise VolumeFormatError("file too short for a NIfTI-1 header")
    for order in "<>":
        if struct.unpack(order + "i", raw[:4])[0] == 348:
            break
    else:
        raise VolumeFormatError("sizeof_hdr is not 348; not a NIfTI-1 file")
    values = struct.unpack(order + _HEADER_FMT, raw[:348])
    hdr, pos = {}, 0
    for name, code in _HEADER_FIELDS:
        n = int(code[:-1]) if code[:-1].isdigit() and code[-1] != "s" else 1
        hdr[name] = values[pos] if n == 1 else tuple(values[pos:pos + n])
        pos += n
    if hdr["magic"] not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"bad NIfTI magic {hdr['magic']!r}")
    if hdr["magic"] == b"ni1\x00":
        raise VolumeFormatError("two-file (.hdr/.img) NIfTI is not supported")
    return hdr, order


def _qform_matrix(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    zooms = np.array([hdr["pixdim"][1], hdr["pixdim"][2], hdr["pixdim"][3] * qfac])
    return rot * zooms


def header_affine(hdr: dict) -> np.ndarray:
    """3x3 linear part of the voxel-to-world transform (sform > qform > pixdim)."""
    if hdr["sform_code"] > 0:
        return np.array([hdr["srow_x"][:3], hdr["srow_y"][:3], hdr["srow_z"][:3]], dtype=float)
    if hdr["qform_code"] > 0:
        return _qform_matrix(hdr)
    return np.diag([abs(p) if p != 0 else 1.0 for p in hdr["pixdim"][1:4]])


def axis_codes(linear: np.ndarray, tol: float = ORIENTATION_TOL) -> tuple[list[int], list[int], np.ndarray]:
    """Map each data axis to a world (RAS) axis and sign.

    Returns ``(world_axis, sign, zooms)`` per data axis. Raises for oblique
    direction cosines.
    """
    zooms = np.linalg.norm(linear, axis=0)
    if np.any(zooms <= 0):
        raise VolumeFormatError("degenerate affine: zero-length axis")
    cosines = linear / zooms
    world, sign = [], []
    for j in range(3):
        i = int(np.argmax(np.abs(cosines[:, j])))
        s = 1 if cosines[i, j] > 0 else -1
        target = np.zeros(3)
        target[i] = s
        if np.max(np.abs(cosines[:, j] - target)) > tol:
            raise VolumeFormatError(
                f"oblique orientation (direction cosines {cosines[:, j].round(4).tolist()}); "
                "only axis-aligned affines are supported"
            )
        world.append(i)
        sign.append(s)
    if sorted(world) != [0, 1, 2]:
        raise VolumeFormatError("affine maps two data axes onto the same world axis")
    return world, sign, zooms


def _reorient_to_ras(data: np.ndarray, world: list[int], sign: list[int]) -> np.ndarray:
    # data axes 0..2 are spatial; trailing axes (channels) untouched
    for j, s in enumerate(sign):
        if s < 0:
            data = np.flip(data, axis=j)
    order = [world.index(i) for i in range(3)] + list(range(3, data.ndim))
    return np.transpose(data, order)


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, ...], dict]:
    opener = gzip.open if _is_gz(path) else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    hdr, order = parse_nifti_header(raw)
    code = hdr["datatype"]
    if code not in NIFTI_DTYPES:
        raise VolumeFormatError(f"unsupported NIfTI datatype code {code}")
    dim = hdr["dim"]
    ndim = dim[0]
    if not 2 <= ndim <= 5:
        raise VolumeFormatError(f"unsupported dimensionality dim[0]={ndim}")
    dims = [max(1, int(d)) for d in dim[1:ndim + 1]] + [1] * (7 - ndim)
    if dims[3] > 1 and dims[4] > 1:
        raise VolumeFormatError("time series of feature stacks are not supported")
    channels = dims[3] * dims[4]
    spatial = dims[:3]
    dtype = np.dtype(order + NIFTI_DTYPES[code])
    offset = int(hdr["vox_offset"])
    count = int(np.prod(spatial)) * channels
    if offset < 348 or len(raw) < offset + count * dtype.itemsize:
        raise VolumeFormatError("truncated NIfTI data block")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(spatial + [channels], order="F").astype(dtype.newbyteorder("="))

    world, sign, zooms = axis_codes(header_affine(hdr))
    data = _reorient_to_ras(data, world, sign)
    voxel_size = [0.0] * 3
    for j, i in enumerate(world):
        # header floats are single precision; recover the shortest decimal (1.4, not 1.39999998)
        voxel_size[i] = float(str(np.float32(zooms[j])))
    # drop the singleton spatial axis of 2D files (it came from data axis 2)
    if ndim == 2 or hdr["intent_name"].rstrip(b"\x00") == b"2d":
        drop = world[2]
        data = np.take(data, 0, axis=drop)
        voxel_size.pop(drop)
    data = np.moveaxis(data, -1, 0)
    if channels == 1:
        data = data[0]
    return np.ascontiguousarray(data), tuple(voxel_size), hdr


def _write_nifti(path: Path, data: np.ndarray, voxel_size: tuple[float, ...], channels: int, kind: str) -> None:
    code = NIFTI_CODES.get(data.dtype.str[1:])
    if code is None:
        raise ValidationError(f"dtype {data.dtype} cannot be written as NIfTI-1")
    stack = data if channels > 1 else data[None]
    spatial = stack.shape[1:]
    nd = len(spatial)
    dim = [0] * 8
    dim[0] = 5 if channels > 1 else nd
    for k, d in enumerate(spatial):
        dim[k + 1] = d
    for k in range(nd + 1, 8):
        dim[k] = 1
    if channels > 1:
        dim[5] = channels
    vs = list(voxel_size) + [1.0] * (3 - nd)
    pixdim = [1.0, *vs, 1.0, 1.0, 1.0, 1.0]
    hdr = {name: 0 for name, _ in _HEADER_FIELDS}
    hdr.update(
        sizeof_hdr=348, data_type=b"", db_name=b"", regular=b"r", dim=tuple(dim),
        intent_code=1007 if channels > 1 else (1002 if kind == "label" else 0),
        datatype=code, bitpix=data.dtype.itemsize * 8, pixdim=tuple(pixdim),
        vox_offset=352.0, scl_slope=1.0, scl_inter=0.0, xyzt_units=2,
        descrip=b"segbias", aux_file=b"", qform_code=1, sform_code=1,
        srow_x=(vs[0], 0.0, 0.0, 0.0), srow_y=(0.0, vs[1], 0.0, 0.0), srow_z=(0.0, 0.0, vs[2], 0.0),
        # a 2D feature stack needs dim[0]=5, so flag the singleton z axis
        intent_name=b"2d" if nd == 2 and channels > 1 else b"", magic=b"n+1\x00",
    )
    values = []
    for name, code_ in _HEADER_FIELDS:
        v = hdr[name]
        values.extend(v if isinstance(v, tuple) else [v])
    header = struct.pack("<" + _HEADER_FMT, *values) + b"\x00\x00\x00\x00"
    # NIfTI stores x fastest; channels live in dim[5]
    body = np.moveaxis(stack, 0, -1).astype(data.dtype.newbyteorder("<")).tobytes(order="F")
    if _is_gz(path):
        # fixed mtime keeps repeated writes byte-identical
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", filename="", mtime=0) as fh:
            fh.write(header + body)
    else:
        path.write_bytes(header + body)


# ---------------------------------------------------------------------------
# SimpleVol
# ---------------------------------------------------------------------------

def _read_simplevol(path: Path) -> tuple[np.ndarray, tuple[float, ...], dict]:
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"SimpleVol header is not valid JSON: {exc}") from None
    for key in ("dims", "voxel_size", "dtype", "channels", "data_file"):
        if key not in meta:
            raise VolumeFormatError(f"SimpleVol header lacks {key!r}")
    if meta["dtype"] not in SIMPLEVOL_DTYPES:
        raise VolumeFormatError(f"unsupported SimpleVol dtype {meta['dtype']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    channels = int(meta["channels"])
    payload = (path.parent / meta["data_file"]).read_bytes()
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    expected = int(np.prod(dims)) * channels * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"SimpleVol payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("=")).reshape((channels,) + dims)
    if channels == 1:
        data = data[0]
    return data, tuple(float(v) for v in meta["voxel_size"]), meta


def _write_simplevol(path: Path, data: np.ndarray, voxel_size, channels: int, kind: str, table=None) -> None:
    if data.dtype.name not in SIMPLEVOL_DTYPES:
        raise ValidationError(f"dtype {data.dtype} cannot be written as SimpleVol")
    stack = data if channels > 1 else data[None]
    raw_name = path.name[: -len(".json")] + ".raw"
    meta = {
        "format": "simplevol",
        "version": 1,
        "kind": kind,
        "dims": list(stack.shape[1:]),
        "voxel_size": list(voxel_size),
        "dtype": data.dtype.name,
        "channels": channels,
        "data_file": raw_name,
    }
    if table is not None:
        meta["label_table"] = {str(k): v for k, v in table.items()}
    (path.parent / raw_name).write_bytes(stack.astype(data.dtype.newbyteorder("<")).tobytes(order="C"))
    path.write_text(json.dumps(meta, indent=2) + "\n")


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _as_labels(data: np.ndarray, voxel_size, table=None) -> LabelMap:
    if data.ndim != len(voxel_size):
        raise VolumeFormatError("label files must have a single channel")
    if data.dtype.kind == "f":
        rounded = np.rint(data)
        if np.any(np.abs(data - rounded) > LABEL_INTEGRAL_TOL):
            raise VolumeFormatError("label data contain non-integral values")
        if rounded.size and rounded.min() < 0:
            raise VolumeFormatError("label data contain negative values")
        data = rounded.astype(np.int32)
    return LabelMap(data, VoxelGeometry(data.shape, voxel_size), table)


def load_volume(path, kind: str = "intensity") -> VoxelGrid | LabelMap:
    """Read a NIfTI-1 (``.nii``/``.nii.gz``) or SimpleVol (``.json``) file.

    ``kind`` is ``"intensity"`` or ``"label"``. Label loads accept float
    storage only when every value is integral within 1e-6 and reject
    non-identity intensity scaling.
    """
    if kind not in ("intensity", "label"):
        raise ValidationError(f"kind must be 'intensity' or 'label', got {kind!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    fmt = _format_of(path)
    if fmt == "nifti":
        data, voxel_size, hdr = _read_nifti(path)
        slope, inter = hdr["scl_slope"], hdr["scl_inter"]
        scaled = slope not in (0.0, 1.0) or inter != 0.0
        table = None
        if kind == "label":
            if scaled:
                raise VolumeFormatError("label file has non-identity scl_slope/scl_inter")
        elif scaled:
            out = np.float64 if data.dtype == np.float64 else np.float32
            data = (data.astype(np.float64) * (slope if slope != 0 else 1.0) + inter).astype(out)
    else:
        data, voxel_size, meta = _read_simplevol(path)
        table = meta.get("label_table")
        if table is not None:
            table = {int(k): v for k, v in table.items()}
    if kind == "label":
        return _as_labels(data, voxel_size, table)
    if data.ndim == len(voxel_size):
        geometry = VoxelGeometry(data.shape, voxel_size)
    else:
        geometry = VoxelGeometry(data.shape[1:], voxel_size)
    return VoxelGrid(data, geometry)


def save_volume(vol: VoxelGrid | LabelMap, path, format: str | None = None) -> None:
    """Write a grid or label map; ``format`` is inferred from the suffix when omitted.

    NIfTI paths must end in ``.nii``/``.nii.gz``; SimpleVol headers in ``.json``
    (the payload goes next to it with a ``.raw`` suffix).
    """
    path = Path(path)
    fmt = format or _format_of(path)
    if fmt not in ("nifti", "simplevol"):
        raise ValidationError(f"unknown format {fmt!r}")
    if fmt == "simplevol" and not path.name.endswith(".json"):
        raise ValidationError("SimpleVol header path must end in .json")
    if isinstance(vol, LabelMap):
        data, channels, kind, table = vol.labels, 1, "label", vol.label_table
        if data.dtype.name not in ("uint8", "int16", "int32"):
            if data.max(initial=0) > np.iinfo(np.int32).max:
                raise ValidationError("label ids exceed int32 range")
            data = data.astype(np.int32)
    elif isinstance(vol, VoxelGrid):
        data, channels, kind, table = vol.data, vol.channels, "intensity", None
    else:
        raise ValidationError(f"cannot save object of type {type(vol).__name__}")
    parent = path.parent
    if not parent.is_dir():
        raise FileNotFoundError(f"directory does not exist: {parent}")
    if not os.access(parent, os.W_OK):
        raise PermissionError(f"directory is not writable: {parent}")
    if fmt == "nifti":
        _write_nifti(path, data, vol.geometry.voxel_size, channels, kind)
    else:
        _write_simplevol(path, data, vol.geometry.voxel_size, channels, kind, table)
