"""Deterministic array containers.

np.savez embeds zip-entry timestamps, so identical arrays produce different
bytes on each run. These helpers write npy members into a zip with a fixed
timestamp instead; the result is readable by np.load and is a pure function
of its contents, which the reproducibility contracts rely on.
"""

from __future__ import annotations

import io
import zipfile
from pathlib import Path

import numpy as np

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_npz(path, **arrays) -> None:
    """Write arrays as an uncompressed npz with fixed zip timestamps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, mode="w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            arr_bytes = io.BytesIO()
            np.save(arr_bytes, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_FIXED_DATE)
            zf.writestr(info, arr_bytes.getvalue())
    path.write_bytes(buf.getvalue())


def load_npz(path) -> dict:
    """Load all arrays from an npz into a plain dict."""
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}
