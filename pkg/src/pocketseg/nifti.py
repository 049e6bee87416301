"""Minimal NIfTI-1 reading and writing (.nii / .nii.gz, little-endian).

Covers what the pipeline needs: 3D scalar volumes, dims, pixdim spacing,
and the affine (sform preferred, qform fallback) for orientation. Written
headers carry a valid sform and round-trip through standard viewers.
Gzipped output is written with mtime=0 so identical volumes produce
identical bytes.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .geometry import Geometry, geometry_from_affine
from .volume import LabelVolume, Volume

HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == 348

_DTYPE_CODES = {
    np.dtype(np.uint8): 2,
    np.dtype(np.int16): 4,
    np.dtype(np.int32): 8,
    np.dtype(np.float32): 16,
    np.dtype(np.float64): 64,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class NiftiError(IOError):
    """Raised for files this reader cannot interpret as NIfTI-1."""


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _quaternion_affine(hdr) -> np.ndarray:
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    a = max(0.0, 1.0 - b * b - c * c - d * d) ** 0.5
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64).reshape(8)
    qfac = -1.0 if pixdim[0] == -1.0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * scale
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def _parse_header(raw: bytes):
    if len(raw) < 348:
        raise NiftiError("file shorter than a NIfTI-1 header")
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) != 348:
        raise NiftiError("not little-endian NIfTI-1 (sizeof_hdr != 348)")
    magic = bytes(hdr["magic"])
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"bad NIfTI magic {magic!r}")
    if magic != b"n+1\x00":
        raise NiftiError("detached .hdr/.img pairs are not supported")
    return hdr


def _read_array_and_geometry(path):
    raw = _read_bytes(path)
    hdr = _parse_header(raw)

    dim = np.asarray(hdr["dim"], dtype=np.int64).reshape(8)
    ndim = int(dim[0])
    if ndim < 3 or ndim > 7:
        raise NiftiError(f"unsupported number of dimensions {ndim}")
    shape = tuple(int(d) for d in dim[1:1 + ndim])
    if any(d != 1 for d in shape[3:]):
        raise NiftiError(f"only 3D volumes supported, got shape {shape}")
    shape = shape[:3]

    code = int(hdr["datatype"])
    if code not in _CODE_DTYPES:
        raise NiftiError(f"unsupported NIfTI datatype code {code}")
    dtype = _CODE_DTYPES[code].newbyteorder("<")

    offset = int(round(float(hdr["vox_offset"])))
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F")

    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64).reshape(8)
    if int(hdr["sform_code"]) > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
    elif int(hdr["qform_code"]) > 0:
        aff = _quaternion_affine(hdr)
    else:
        aff = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])
    geom = geometry_from_affine(aff)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    return data, geom, slope, inter


def read_volume(path) -> Volume:
    """Read an image volume; scl_slope/scl_inter are applied when present."""
    data, geom, slope, inter = _read_array_and_geometry(path)
    arr = np.ascontiguousarray(data)
    if (slope not in (0.0, 1.0) and np.isfinite(slope)) or (inter not in (0.0,) and np.isfinite(inter) and inter != 0.0):
        arr = arr.astype(np.float64) * (slope if slope not in (0.0,) else 1.0) + inter
        arr = arr.astype(np.float32)
    return Volume(arr, geom)


def read_label_volume(path, label_set=(0, 1, 2)) -> LabelVolume:
    """Read a label volume; voxel values must already be integral."""
    data, geom, slope, inter = _read_array_and_geometry(path)
    arr = np.ascontiguousarray(data)
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(arr)
        if not np.allclose(arr, rounded, atol=1e-6):
            raise NiftiError(f"{path}: non-integral values in label volume")
        arr = rounded.astype(np.int16)
    return LabelVolume(arr.astype(np.int16, copy=False), geom, label_set=label_set)


def write_volume(vol: Volume, path, dtype=None) -> None:
    """Write a volume as single-file NIfTI-1 with a valid sform.

    spacing/origin are stored at float32 header precision, the format's
    native width. ``.nii.gz`` paths are gzip-compressed with mtime=0 so the
    bytes are a pure function of the volume.
    """
    path = Path(path)
    if dtype is None:
        dtype = np.uint8 if isinstance(vol, LabelVolume) else np.float32
    dtype = np.dtype(dtype)
    if dtype not in _DTYPE_CODES:
        raise NiftiError(f"unsupported output dtype {dtype}")

    data = np.asarray(vol.data).astype(dtype)
    geom = vol.geometry

    hdr = np.zeros(1, dtype=HEADER_DTYPE)[0]
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = data.shape
    hdr["dim"] = dim
    hdr["datatype"] = _DTYPE_CODES[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = geom.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = b"pocketseg"
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    aff = geom.affine()
    hdr["srow_x"] = aff[0].astype(np.float32)
    hdr["srow_y"] = aff[1].astype(np.float32)
    hdr["srow_z"] = aff[2].astype(np.float32)
    hdr["magic"] = b"n+1\x00"

    body = hdr.tobytes() + b"\x00" * 4 + data.tobytes(order="F")
    if path.name.endswith(".gz"):
        body = gzip.compress(body, compresslevel=6, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body)
