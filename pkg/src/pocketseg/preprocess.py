"""Case preprocessing: reorient, resample, window, normalize; patch-size
derivation from median dims; manifest handling; and training patch sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nifti, storage
from .geometry import Geometry, validate_orientation
from .volume import LabelVolume, Volume, reorient, resample


@dataclass(frozen=True)
class PreprocessConfig:
    target_orientation: str = "RAI"
    target_spacing: tuple = (0.469, 0.469, 5.0)
    window_percentiles: tuple = (0.5, 99.5)
    normalization: str = "zscore"
    max_patch: tuple = (256, 256, 128)

    def __post_init__(self):
        object.__setattr__(self, "target_orientation",
                           validate_orientation(self.target_orientation))
        object.__setattr__(self, "target_spacing",
                           tuple(float(s) for s in self.target_spacing))
        object.__setattr__(self, "window_percentiles",
                           tuple(float(p) for p in self.window_percentiles))
        object.__setattr__(self, "max_patch",
                           tuple(int(p) for p in self.max_patch))
        low, high = self.window_percentiles
        if not (0 <= low < high <= 100):
            raise ValueError(f"window percentiles must satisfy 0 <= low < high <= 100, "
                             f"got {self.window_percentiles}")
        if any(s <= 0 for s in self.target_spacing):
            raise ValueError(f"target spacing must be positive, got {self.target_spacing}")
        if any(p < 1 for p in self.max_patch):
            raise ValueError(f"max patch components must be >= 1, got {self.max_patch}")
        if self.normalization != "zscore":
            raise ValueError(f"unknown normalization {self.normalization!r}")


def window_normalize(vol: Volume, cfg: PreprocessConfig) -> Volume:
    """Clip to the configured intensity percentiles, then z-score.

    Statistics (mean/std, population) are computed on the clipped volume;
    a zero-variance volume maps to all zeros.
    """
    data = np.asarray(vol.data, dtype=np.float64)
    low, high = np.percentile(data, cfg.window_percentiles)
    clipped = np.clip(data, low, high)
    mean = clipped.mean()
    std = clipped.std()
    if std == 0:
        out = np.zeros_like(clipped, dtype=np.float32)
    else:
        out = ((clipped - mean) / std).astype(np.float32)
    return Volume(out, vol.geometry)


def derive_patch_size(median_dims, max_patch) -> tuple:
    """Per axis: nearest power of two <= the median dim, capped at max_patch."""
    out = []
    for m, cap in zip(median_dims, max_patch):
        m = int(m)
        cap = int(cap)
        if m < 1 or cap < 1:
            raise ValueError(f"dims must be >= 1, got median {median_dims}, max {max_patch}")
        out.append(min(cap, 1 << (m.bit_length() - 1)))
    return tuple(out)


def preprocess_case(image: Volume, label: LabelVolume | None, cfg: PreprocessConfig):
    """Standardize one case: reorient + resample both, window/normalize the image.

    Image and label must share geometry when a label is present. Labels are
    resampled with nearest-neighbor so the label set is preserved.
    """
    if label is not None and (
        image.geometry.orientation != label.geometry.orientation
        or not np.allclose(image.geometry.spacing, label.geometry.spacing, rtol=0, atol=1e-5)
        or not np.allclose(image.geometry.origin, label.geometry.origin, rtol=0, atol=1e-3)
        or image.dims != label.dims
    ):
        raise ValueError(
            "image/label geometry mismatch:\n"
            f"  image: dims={image.dims} {image.geometry}\n"
            f"  label: dims={label.dims} {label.geometry}"
        )

    image = reorient(image, cfg.target_orientation)
    image = resample(image, cfg.target_spacing, mode="linear")
    image = window_normalize(image, cfg)

    if label is not None:
        label = reorient(label, cfg.target_orientation)
        label = resample(label, cfg.target_spacing, mode="nearest")
        label = label.with_data(label.data, image.geometry)
    return image, label


@dataclass
class CaseRecord:
    case_id: str
    image_path: str
    label_path: str | None = None
    split_tag: str = "train"


@dataclass
class DatasetManifest:
    cases: list
    median_dims: tuple | None = None
    patch_size: tuple | None = None

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate case ids in manifest: {dupes}")

    def case_ids(self):
        return [c.case_id for c in self.cases]

    def save(self, path) -> None:
        payload = {
            "cases": [asdict(c) for c in self.cases],
            "median_dims": list(self.median_dims) if self.median_dims else None,
            "patch_size": list(self.patch_size) if self.patch_size else None,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        payload = json.loads(Path(path).read_text())
        cases = [CaseRecord(**c) for c in payload["cases"]]
        md = payload.get("median_dims")
        ps = payload.get("patch_size")
        return cls(cases, tuple(md) if md else None, tuple(ps) if ps else None)


def _lower_median(values) -> int:
    ordered = sorted(values)
    return int(ordered[(len(ordered) - 1) // 2])


def preprocess_dataset(manifest: DatasetManifest, cfg: PreprocessConfig, cache_dir):
    """Preprocess every case, cache arrays, and derive the dataset patch size.

    Cached cases are stored one npz per case (image, label, spacing, origin,
    orientation); files are byte-stable so reruns hit the cache. Returns the
    manifest with median dims and patch size filled in, plus a list of
    (case_id, error) pairs for cases that failed.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    if not manifest.cases:
        raise ValueError("no cases in manifest")

    dims_per_case = []
    failures = []
    ok_cases = []
    for rec in sorted(manifest.cases, key=lambda c: c.case_id):
        try:
            image = nifti.read_volume(rec.image_path)
            label = nifti.read_label_volume(rec.label_path) if rec.label_path else None
            image, label = preprocess_case(image, label, cfg)
        except Exception as exc:  # per-case failure, reported upstream
            failures.append((rec.case_id, str(exc)))
            continue
        arrays = {
            "image": image.data.astype(np.float32),
            "spacing": np.asarray(image.geometry.spacing, dtype=np.float64),
            "origin": np.asarray(image.geometry.origin, dtype=np.float64),
            "orientation": np.array(image.geometry.orientation),
        }
        if label is not None:
            arrays["label"] = label.data.astype(np.int16)
        out_path = cache_dir / f"{rec.case_id}.npz"
        _write_if_changed(out_path, arrays)
        dims_per_case.append(image.dims)
        ok_cases.append(rec)

    if not ok_cases:
        raise ValueError("all cases failed preprocessing: "
                         + "; ".join(f"{cid}: {msg}" for cid, msg in failures))

    median_dims = tuple(_lower_median([d[a] for d in dims_per_case]) for a in range(3))
    patch_size = derive_patch_size(median_dims, cfg.max_patch)
    out = DatasetManifest(list(manifest.cases), median_dims, patch_size)
    out.save(cache_dir / "manifest.json")
    return out, failures


def _write_if_changed(path: Path, arrays: dict) -> bool:
    """Write the case npz only when bytes differ; returns True on cache hit."""
    import io as _io
    buf = _io.BytesIO()
    tmp = path.with_suffix(".tmp.npz")
    storage.save_npz(tmp, **arrays)
    new_bytes = tmp.read_bytes()
    tmp.unlink()
    if path.exists() and path.read_bytes() == new_bytes:
        return True
    path.write_bytes(new_bytes)
    return False


def load_cached_case(cache_dir, case_id):
    """Load a preprocessed case back as (Volume, LabelVolume | None)."""
    arrays = storage.load_npz(Path(cache_dir) / f"{case_id}.npz")
    geom = Geometry(spacing=tuple(arrays["spacing"]),
                    origin=tuple(arrays["origin"]),
                    orientation=str(arrays["orientation"]))
    image = Volume(arrays["image"], geom)
    label = None
    if "label" in arrays:
        label = LabelVolume(arrays["label"], geom)
    return image, label


@dataclass
class Patch:
    """One training patch: channels-first image, label grid, and provenance."""

    image: np.ndarray  # (C, px, py, pz) float32
    label: np.ndarray  # (px, py, pz) int16
    case_id: str = ""
    corner: tuple = (0, 0, 0)
    fg_fallback: bool = False  # foreground draw requested but none present


def sample_patch(image: np.ndarray, label: np.ndarray, patch_size, rng,
                 foreground_bias: float = 0.5, case_id: str = "") -> Patch:
    """Sample one patch, biased toward foreground centers.

    With probability ``foreground_bias`` the center is a uniformly chosen
    foreground (label > 0) voxel, otherwise a uniform voxel. Axes where the
    volume is smaller than the patch are centered and zero-padded (image) /
    background-padded (label); otherwise the window is clamped inside the
    volume. Deterministic given the generator state.
    """
    if not 0 <= foreground_bias <= 1:
        raise ValueError(f"foreground_bias must be in [0, 1], got {foreground_bias}")
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    label = np.asarray(label)
    dims = label.shape
    patch_size = tuple(int(p) for p in patch_size)

    fg_fallback = False
    if rng.random() < foreground_bias:
        fg = np.argwhere(label > 0)
        if len(fg) == 0:
            fg_fallback = True
            center = tuple(int(rng.integers(0, n)) for n in dims)
        else:
            center = tuple(int(v) for v in fg[rng.integers(0, len(fg))])
    else:
        center = tuple(int(rng.integers(0, n)) for n in dims)

    corner = []
    for c, p, n in zip(center, patch_size, dims):
        if n < p:
            corner.append(-((p - n) // 2))
        else:
            corner.append(min(max(c - p // 2, 0), n - p))
    corner = tuple(corner)

    img_patch = np.zeros((image.shape[0],) + patch_size, dtype=np.float32)
    lab_patch = np.zeros(patch_size, dtype=np.int16)
    src = tuple(slice(max(c, 0), min(c + p, n)) for c, p, n in zip(corner, patch_size, dims))
    dst = tuple(slice(s.start - c, s.stop - c) for s, c in zip(src, corner))
    img_patch[(slice(None),) + dst] = image[(slice(None),) + src]
    lab_patch[dst] = label[src]

    return Patch(img_patch, lab_patch, case_id=case_id, corner=corner,
                 fg_fallback=fg_fallback)
