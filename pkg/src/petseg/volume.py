"""Dense 3D scalar grids with physical voxel spacing.

``Volume3D`` is the carrier type for PET, CT, label and probability data.
Arrays use shape ``(nx, ny, nz)`` with x = left-right, y =
anterior-posterior, z = inferior-superior; on disk the same data is laid
out x-fastest (Fortran order), which the NIfTI layer takes care of.
Values are treated as immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ShapeMismatch, ValidationError


class VolumeKind(Enum):
    PET_SUV = "pet_suv"
    CT_HU = "ct_hu"
    LABEL = "label"
    PROBABILITY = "probability"


def _check_spacing(spacing) -> tuple[float, float, float]:
    if len(spacing) != 3:
        raise ValidationError(f"spacing must have 3 components, got {len(spacing)}")
    out = tuple(float(s) for s in spacing)
    for s in out:
        if not math.isfinite(s) or s <= 0.0:
            raise ValidationError(f"spacing components must be positive and finite, got {out}")
    return out


@dataclass(frozen=True)
class Volume3D:
    """A 3D scalar grid plus per-axis spacing in millimetres."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    kind: VolumeKind = VolumeKind.PET_SUV

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got ndim={data.ndim}")
        if self.kind is VolumeKind.LABEL:
            if not np.issubdtype(data.dtype, np.integer):
                float_data = data
                data = np.rint(float_data).astype(np.int32)
                if not np.array_equal(data, float_data):
                    raise ValidationError("LABEL volume values must be integers")
            if data.size and data.min() < 0:
                raise ValidationError("LABEL volume values must be nonnegative")
            if data.dtype != np.int32:
                data = data.astype(np.int32)
        else:
            if data.dtype != np.float64:
                data = data.astype(np.float64)
        object.__setattr__(self, "data", np.ascontiguousarray(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_data(self, data: np.ndarray, kind: VolumeKind | None = None) -> "Volume3D":
        """New volume on the same grid with different values."""
        return Volume3D(data, self.spacing, self.kind if kind is None else kind)


def require_same_grid(a: Volume3D | "BinaryMask", b: Volume3D | "BinaryMask", what: str = "volumes"):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what} have different shapes: {a.shape} vs {b.shape}")
    if a.spacing != b.spacing:
        raise ShapeMismatch(f"{what} have different spacings: {a.spacing} vs {b.spacing}")


@dataclass(frozen=True)
class BinaryMask:
    """Foreground voxel set on a spaced grid."""

    mask: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 3:
            raise ValidationError(f"mask must be 3D, got ndim={mask.ndim}")
        if mask.dtype != np.bool_:
            mask = mask.astype(bool)
        object.__setattr__(self, "mask", np.ascontiguousarray(mask))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @classmethod
    def from_label_volume(cls, vol: Volume3D, label: int) -> "BinaryMask":
        """Mask of voxels equal to ``label``."""
        return cls(vol.data == label, vol.spacing)

    @classmethod
    def from_volume_foreground(cls, vol: Volume3D) -> "BinaryMask":
        """Mask of all nonzero voxels."""
        return cls(vol.data != 0, vol.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mask.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def to_label_volume(self) -> Volume3D:
        return Volume3D(self.mask.astype(np.int32), self.spacing, VolumeKind.LABEL)
