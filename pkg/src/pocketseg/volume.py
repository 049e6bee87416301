"""Volumes and label volumes with physical geometry, plus the reorientation
and resampling primitives used throughout the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import Geometry, direction_matrix, validate_orientation

LABEL_BACKGROUND = 0
LABEL_ORGAN = 1
LABEL_TUMOR = 2
LABEL_SET = (LABEL_BACKGROUND, LABEL_ORGAN, LABEL_TUMOR)


@dataclass
class Volume:
    """3D scalar intensity grid with physical geometry."""

    data: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(d < 1 for d in self.data.shape):
            raise ValueError(f"volume dims must be >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data contains non-finite values")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def with_data(self, data: np.ndarray, geometry: Geometry | None = None):
        return type(self)(data, self.geometry if geometry is None else geometry)


@dataclass
class LabelVolume(Volume):
    """3D integer label grid; 0 background, 1 organ, 2 tumor."""

    label_set: tuple = LABEL_SET

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"label data must be integer, got {self.data.dtype}")
        if self.data.size and not np.all(np.isin(self.data, self.label_set)):
            bad = sorted(set(np.unique(self.data)) - set(self.label_set))
            raise ValueError(f"labels {bad} outside label set {self.label_set}")

    def with_data(self, data, geometry=None):
        return LabelVolume(data, self.geometry if geometry is None else geometry,
                           label_set=self.label_set)


def physical_extent(vol: Volume) -> tuple:
    """Physical size of the grid in mm: dims * spacing per axis."""
    return tuple(d * s for d, s in zip(vol.dims, vol.geometry.spacing))


def reorient(vol: Volume, target: str) -> Volume:
    """Permute/flip voxel axes so the orientation code becomes ``target``
    while the physical-space content is unchanged.

    Pure axis reorientation: both the current and target codes are signed
    permutations, so the data transform is an exact permute + flip and the
    round trip back to the original code reproduces the volume (bit-exactly
    whenever the origin offsets are exactly representable, e.g. dyadic
    spacings or a zero origin).
    """
    target = validate_orientation(target)
    src = vol.geometry
    if target == src.orientation:
        return vol.with_data(vol.data)

    src_dir = src.direction
    tgt_dir = direction_matrix(target)

    # source axis and sign for each target axis: tgt column = +/- src column
    perm = []
    flips = []
    for j_t in range(3):
        col = tgt_dir[:, j_t]
        for j_s in range(3):
            if np.array_equal(src_dir[:, j_s], col):
                perm.append(j_s)
                break
            if np.array_equal(src_dir[:, j_s], -col):
                perm.append(j_s)
                flips.append(j_s)
                break

    origin = np.asarray(src.origin, dtype=np.float64).copy()
    for j_s in flips:
        shift = src_dir[:, j_s] * (src.spacing[j_s] * (vol.dims[j_s] - 1))
        origin = origin + shift

    data = vol.data
    for j_s in flips:
        data = np.flip(data, axis=j_s)
    data = np.transpose(data, axes=perm).copy()

    spacing = tuple(src.spacing[j] for j in perm)
    geom = Geometry(spacing=spacing, origin=tuple(origin), orientation=target)
    return vol.with_data(data, geom)


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def resample(vol: Volume, target_spacing, mode: str = "linear") -> Volume:
    """Resample onto a grid with the given spacing (mm per axis).

    Output dims are round(dims * spacing / target_spacing), floored at 1;
    first voxel centers of input and output coincide (origin unchanged).
    Coordinates beyond the input grid clamp to the edge. ``mode`` is
    "linear" for images or "nearest"; label volumes must use "nearest".
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_spacing) != 3 or any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be 3 positive reals, got {target_spacing}")
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if isinstance(vol, LabelVolume) and mode != "nearest":
        raise ValueError("label volumes must be resampled with mode='nearest' "
                         "(linear interpolation smears labels)")

    src = vol.geometry
    out_dims = tuple(
        max(1, _round_half_away(n * s / t))
        for n, s, t in zip(vol.dims, src.spacing, target_spacing)
    )
    out_dims_arr = np.array(out_dims)

    axes = [np.arange(n, dtype=np.float64) * (t / s)
            for n, s, t in zip(out_dims, src.spacing, target_spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    coords = np.stack(coords, axis=0)
    # clamp to the grid; mode="nearest" in map_coordinates also edge-clamps
    for a in range(3):
        np.clip(coords[a], 0, vol.dims[a] - 1, out=coords[a])

    order = 1 if mode == "linear" else 0
    out = ndimage.map_coordinates(vol.data, coords.reshape(3, -1), order=order,
                                  mode="nearest", prefilter=False)
    out = out.reshape(tuple(out_dims_arr)).astype(vol.data.dtype, copy=False)

    geom = src.replace(spacing=target_spacing)
    return vol.with_data(out, geom)


def resample_to_reference(vol: Volume, ref_dims, ref_geometry: Geometry,
                          mode: str = "nearest") -> Volume:
    """Resample onto an explicit reference grid (dims + geometry).

    The volume must already be in the reference orientation; sampling aligns
    first voxel centers, as in :func:`resample`, but the output dims are
    taken from the reference instead of being derived from spacing ratios.
    """
    if vol.geometry.orientation != ref_geometry.orientation:
        raise ValueError(
            f"volume orientation {vol.geometry.orientation} does not match "
            f"reference {ref_geometry.orientation}; reorient first"
        )
    if isinstance(vol, LabelVolume) and mode != "nearest":
        raise ValueError("label volumes must be resampled with mode='nearest'")

    ref_dims = tuple(int(d) for d in ref_dims)
    axes = [np.arange(n, dtype=np.float64) * (t / s)
            for n, s, t in zip(ref_dims, vol.geometry.spacing, ref_geometry.spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    coords = np.stack(coords, axis=0)
    for a in range(3):
        np.clip(coords[a], 0, vol.dims[a] - 1, out=coords[a])

    order = 1 if mode == "linear" else 0
    out = ndimage.map_coordinates(vol.data, coords.reshape(3, -1), order=order,
                                  mode="nearest", prefilter=False)
    out = out.reshape(ref_dims).astype(vol.data.dtype, copy=False)
    return vol.with_data(out, ref_geometry)
