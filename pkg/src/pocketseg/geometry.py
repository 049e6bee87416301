"""Physical geometry of voxel grids: spacing, origin, and axis orientation.

Orientation codes use the "toward" convention in a RAS+ world frame: each
letter names the anatomical direction in which the corresponding voxel index
increases (R/L along world x, A/P along world y, S/I along world z). "RAI"
therefore means +i points Right, +j points Anterior, +k points Inferior.
The equivalent direction matrix is a signed permutation whose column j is
the world unit vector of voxel axis j.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# letter -> (world axis, sign)
_AXIS_OF_LETTER = {
    "R": (0, 1), "L": (0, -1),
    "A": (1, 1), "P": (1, -1),
    "S": (2, 1), "I": (2, -1),
}
_LETTER_OF_AXIS = {
    (0, 1): "R", (0, -1): "L",
    (1, 1): "A", (1, -1): "P",
    (2, 1): "S", (2, -1): "I",
}


class OrientationError(ValueError):
    """Raised for malformed or non-permutation orientation codes."""


def validate_orientation(code: str) -> str:
    """Check a 3-letter orientation code, returning it uppercased.

    Raises OrientationError naming the offending letter when a character is
    not one of RLAPSI or when two letters address the same world axis.
    """
    if not isinstance(code, str) or len(code) != 3:
        raise OrientationError(f"orientation code must be 3 letters, got {code!r}")
    code = code.upper()
    seen = {}
    for letter in code:
        if letter not in _AXIS_OF_LETTER:
            raise OrientationError(
                f"invalid axis letter {letter!r} in orientation code {code!r}"
            )
        axis = _AXIS_OF_LETTER[letter][0]
        if axis in seen:
            raise OrientationError(
                f"axis letter {letter!r} repeats world axis of {seen[axis]!r} "
                f"in orientation code {code!r}"
            )
        seen[axis] = letter
    return code


def direction_matrix(code: str) -> np.ndarray:
    """Signed-permutation matrix for an orientation code (columns = voxel axes)."""
    code = validate_orientation(code)
    mat = np.zeros((3, 3), dtype=np.int64)
    for j, letter in enumerate(code):
        axis, sign = _AXIS_OF_LETTER[letter]
        mat[axis, j] = sign
    return mat


def orientation_from_matrix(direction: np.ndarray, *, atol: float = 1e-3) -> str:
    """Orientation code for a direction matrix, snapping oblique inputs.

    Each column is assigned the world axis with the largest absolute
    component. A warning is emitted when the matrix is not already a signed
    permutation to within ``atol`` of unit entries.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (3, 3):
        raise OrientationError(f"direction matrix must be 3x3, got {direction.shape}")
    # normalize columns so voxel scaling does not masquerade as obliqueness
    norms = np.linalg.norm(direction, axis=0)
    if np.any(norms == 0):
        raise OrientationError("direction matrix has a zero column")
    unit = direction / norms

    letters = []
    used = set()
    for j in range(3):
        axis = int(np.argmax(np.abs(unit[:, j])))
        if axis in used:
            raise OrientationError(
                f"direction matrix columns are not independent axes:\n{direction}"
            )
        used.add(axis)
        sign = 1 if unit[axis, j] >= 0 else -1
        letters.append(_LETTER_OF_AXIS[(axis, sign)])

    code = "".join(letters)
    if not np.allclose(np.abs(unit), np.abs(direction_matrix(code)), atol=atol):
        warnings.warn(
            f"oblique direction matrix snapped to nearest axis code {code}",
            stacklevel=2,
        )
    return code


def is_signed_permutation(mat: np.ndarray) -> bool:
    mat = np.asarray(mat)
    if mat.shape != (3, 3):
        return False
    return (
        np.all(np.isin(mat, (-1, 0, 1)))
        and np.all(np.sum(np.abs(mat), axis=0) == 1)
        and np.all(np.sum(np.abs(mat), axis=1) == 1)
    )


@dataclass(frozen=True)
class Geometry:
    """Voxel-to-world mapping: per-axis spacing (mm), origin of voxel (0,0,0)
    in mm, and a 3-letter orientation code."""

    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    orientation: str = "RAI"

    def __post_init__(self):
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin must have 3 components")
        if not all(np.isfinite(spacing)) or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing components must be positive, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError(f"origin components must be finite, got {origin}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "orientation", validate_orientation(self.orientation))

    @property
    def direction(self) -> np.ndarray:
        return direction_matrix(self.orientation)

    def affine(self) -> np.ndarray:
        """4x4 voxel-index-to-world affine (RAS+ world, mm)."""
        aff = np.eye(4, dtype=np.float64)
        aff[:3, :3] = self.direction * np.asarray(self.spacing, dtype=np.float64)
        aff[:3, 3] = self.origin
        return aff

    def voxel_to_world(self, index) -> np.ndarray:
        """World coordinates (mm) of a voxel index (may be fractional)."""
        idx = np.asarray(index, dtype=np.float64)
        return self.direction @ (np.asarray(self.spacing) * idx) + np.asarray(self.origin)

    def replace(self, **kwargs) -> "Geometry":
        fields = {"spacing": self.spacing, "origin": self.origin,
                  "orientation": self.orientation}
        fields.update(kwargs)
        return Geometry(**fields)


def geometry_from_affine(affine: np.ndarray) -> tuple:
    """Split a 4x4 affine into (Geometry, residual obliqueness flag).

    The rotation part is snapped to the nearest signed permutation; spacing
    is the column norm. Returns the snapped Geometry.
    """
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    rot = affine[:3, :3]
    spacing = np.linalg.norm(rot, axis=0)
    code = orientation_from_matrix(rot)
    return Geometry(spacing=tuple(spacing), origin=tuple(affine[:3, 3]),
                    orientation=code)
