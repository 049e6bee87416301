"""Synthetic pelvic phantoms: an ellipsoidal organ containing an ellipsoidal
tumor, with class-dependent intensities plus Gaussian noise.

Centers and semi-axes are specified in mm measured along the voxel axes
from the first voxel center, so membership is analytic and independent of
the stored orientation code. Containment of the tumor ellipsoid inside the
organ ellipsoid is verified exactly at configuration time by maximizing the
organ's quadratic form over the tumor surface (a diagonal trust-region
style secular equation).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import nifti
from .geometry import Geometry
from .preprocess import CaseRecord, DatasetManifest
from .volume import LabelVolume, Volume


def max_organ_form_on_tumor(organ_axes, organ_center, tumor_axes, tumor_center) -> float:
    """Max over the tumor ellipsoid of sum(((x - co) / ao)^2).

    The tumor is contained in the organ iff this value is <= 1. With
    alpha_i = at_i / ao_i and b_i = (ct_i - co_i) / ao_i the problem is
    maximizing f(u) = sum((alpha_i u_i + b_i)^2) over the unit ball; f is
    convex so the max sits on the unit sphere and is found from the
    stationarity condition u_i = alpha_i b_i / (lam - alpha_i^2).
    """
    ao = np.asarray(organ_axes, dtype=np.float64)
    at = np.asarray(tumor_axes, dtype=np.float64)
    co = np.asarray(organ_center, dtype=np.float64)
    ct = np.asarray(tumor_center, dtype=np.float64)
    if np.any(ao <= 0):
        raise ValueError(f"organ semi-axes must be positive, got {tuple(ao)}")
    if np.any(at < 0):
        raise ValueError(f"tumor semi-axes must be >= 0, got {tuple(at)}")

    alpha = at / ao
    b = (ct - co) / ao
    d = alpha ** 2
    c = alpha * b
    r = float((b ** 2).sum())
    d_max = float(d.max())

    nz = c != 0
    if not nz.any():
        # no linear term: best direction is the largest-alpha axis
        return d_max + r

    def psi(lam):
        return float(np.sum(c[nz] ** 2 / (lam - d[nz]) ** 2))

    top_has_c = bool(np.any(nz & (d == d_max)))
    if not top_has_c and psi(d_max) < 1.0:
        # hard case: multiplier pinned at d_max, slack goes to the top axis
        lam = d_max
        return lam + float(np.sum(c[nz] ** 2 / (lam - d[nz]))) + r

    lo = d_max + max(d_max, 1.0) * 1e-15
    hi = d_max + float(np.linalg.norm(c)) + 1e-12
    while psi(hi) >= 1.0:
        hi = d_max + 2.0 * (hi - d_max)
    lam = brentq(lambda L: psi(L) - 1.0, lo, hi, xtol=1e-14, rtol=1e-14)
    return lam + float(np.sum(c[nz] ** 2 / (lam - d[nz]))) + r


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 32)
    spacing: tuple = (1.875, 1.875, 5.0)
    organ_axes: tuple = (30.0, 24.0, 45.0)
    organ_center: tuple = (60.0, 60.0, 80.0)
    tumor_axes: tuple = (12.0, 10.0, 18.0)
    tumor_center: tuple = (65.0, 56.0, 90.0)
    mean_background: float = 60.0
    mean_organ: float = 140.0
    mean_tumor: float = 220.0
    noise_sigma: float = 20.0
    seed: int = 0
    orientation: str = "RAI"

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        worst = max_organ_form_on_tumor(self.organ_axes, self.organ_center,
                                        self.tumor_axes, self.tumor_center)
        if worst > 1.0 + 1e-9:
            raise ValueError(
                f"tumor ellipsoid is not contained in the organ ellipsoid "
                f"(max organ quadratic form on tumor surface = {worst:.6f} > 1)"
            )


def _ellipsoid_mask(dims, spacing, axes, center) -> np.ndarray:
    coords = [np.arange(n, dtype=np.float64) * s for n, s in zip(dims, spacing)]
    terms = []
    for i in range(3):
        shape = [1, 1, 1]
        shape[i] = dims[i]
        x = (coords[i] - center[i]).reshape(shape)
        if axes[i] == 0:
            # degenerate axis: only exact hits count, i.e. effectively none
            terms.append(np.where(x == 0, 0.0, np.inf))
        else:
            terms.append((x / axes[i]) ** 2)
    return terms[0] + terms[1] + terms[2] <= 1.0


def generate_phantom(cfg: PhantomConfig):
    """Deterministically generate one (image, label) phantom pair.

    Labels come from analytic ellipsoid membership of voxel centers;
    intensities are class means plus seeded Gaussian noise; tumor voxels
    are a subset of organ voxels by the containment precondition.
    """
    dims = tuple(int(d) for d in cfg.dims)
    organ = _ellipsoid_mask(dims, cfg.spacing, cfg.organ_axes, cfg.organ_center)
    tumor = _ellipsoid_mask(dims, cfg.spacing, cfg.tumor_axes, cfg.tumor_center)
    tumor &= organ  # containment holds analytically; guard boundary ties

    label = np.zeros(dims, dtype=np.int16)
    label[organ] = 1
    label[tumor] = 2

    intensity = np.full(dims, cfg.mean_background, dtype=np.float64)
    intensity[organ] = cfg.mean_organ
    intensity[tumor] = cfg.mean_tumor
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        intensity = intensity + rng.normal(0.0, cfg.noise_sigma, size=dims)

    geom = Geometry(spacing=cfg.spacing, origin=(0.0, 0.0, 0.0),
                    orientation=cfg.orientation)
    return Volume(intensity.astype(np.float32), geom), LabelVolume(label, geom)


@dataclass(frozen=True)
class PhantomSampler:
    """Bounds for randomized phantom cases; validated so every draw satisfies
    tumor-in-organ containment and the organ fits inside the volume."""

    dims: tuple = (64, 64, 32)
    spacing: tuple = (1.875, 1.875, 5.0)
    organ_axes_range: tuple = ((26.0, 20.0, 38.0), (34.0, 28.0, 52.0))
    center_jitter: tuple = (6.0, 6.0, 10.0)
    tumor_axes_range: tuple = ((8.0, 7.0, 12.0), (13.0, 11.0, 20.0))
    tumor_offset_max: tuple = (6.0, 5.0, 10.0)
    mean_background: float = 60.0
    mean_organ: float = 140.0
    mean_tumor: float = 220.0
    noise_sigma: float = 20.0
    # per-case contrast variation; None pins the class mean
    mean_organ_range: tuple | None = None
    mean_tumor_range: tuple | None = None

    def __post_init__(self):
        ao_lo = np.asarray(self.organ_axes_range[0], dtype=np.float64)
        ao_hi = np.asarray(self.organ_axes_range[1], dtype=np.float64)
        at_lo = np.asarray(self.tumor_axes_range[0], dtype=np.float64)
        at_hi = np.asarray(self.tumor_axes_range[1], dtype=np.float64)
        off = np.asarray(self.tumor_offset_max, dtype=np.float64)
        if np.any(ao_lo <= 0) or np.any(ao_lo > ao_hi) or np.any(at_lo < 0) \
                or np.any(at_lo > at_hi) or np.any(off < 0):
            raise ValueError("malformed sampler bounds")
        # worst case for containment: smallest organ, largest tumor, max offset
        worst = max_organ_form_on_tumor(ao_lo, (0, 0, 0), at_hi, off)
        if worst > 1.0 + 1e-9:
            raise ValueError(
                f"sampler bounds violate containment: worst-case organ form "
                f"value {worst:.6f} > 1"
            )
        extent = np.asarray(self.dims, dtype=np.float64) * np.asarray(self.spacing)
        center_hi = extent / 2 + np.asarray(self.center_jitter)
        if np.any(center_hi + ao_hi > extent) or np.any(extent / 2 - np.asarray(self.center_jitter) - ao_hi < 0):
            raise ValueError("sampler bounds let the organ ellipsoid leave the volume")

    def sample(self, rng) -> PhantomConfig:
        u = lambda lo, hi: tuple(rng.uniform(l, h) for l, h in zip(lo, hi))
        extent = np.asarray(self.dims, dtype=np.float64) * np.asarray(self.spacing)
        organ_axes = u(*self.organ_axes_range)
        center = tuple(e / 2 + rng.uniform(-j, j)
                       for e, j in zip(extent, self.center_jitter))
        tumor_axes = u(*self.tumor_axes_range)
        offset = tuple(rng.uniform(-o, o) for o in self.tumor_offset_max)
        tumor_center = tuple(c + o for c, o in zip(center, offset))
        return PhantomConfig(
            dims=self.dims, spacing=self.spacing,
            organ_axes=organ_axes, organ_center=center,
            tumor_axes=tumor_axes, tumor_center=tumor_center,
            mean_background=self.mean_background, mean_organ=self.mean_organ,
            mean_tumor=self.mean_tumor, noise_sigma=self.noise_sigma,
            seed=int(rng.integers(0, 2 ** 31)),
        )


def generate_dataset(n: int, sampler: PhantomSampler, seed: int, out_dir) -> DatasetManifest:
    """Write n randomized phantom cases as NIfTI pairs plus a manifest.

    Identical (n, sampler, seed) produce byte-identical files.
    """
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n):
        cfg = sampler.sample(rng)
        image, label = generate_phantom(cfg)
        case_id = f"case_{i:04d}"
        image_path = out_dir / f"{case_id}_image.nii"
        label_path = out_dir / f"{case_id}_label.nii"
        nifti.write_volume(image, image_path, dtype=np.float32)
        nifti.write_volume(label, label_path, dtype=np.uint8)
        cases.append(CaseRecord(case_id, str(image_path), str(label_path)))
    manifest = DatasetManifest(cases)
    manifest.save(out_dir / "manifest.json")
    return manifest
