"""Resampling, intensity windowing, coronal MIP and fixed-size extraction.

Resampling uses voxel-center grid alignment: the sample point for output
index i along an axis with source spacing s and target spacing t sits at
physical coordinate (i + 0.5) * t - 0.5 * s measured from the first voxel
center. Out-of-range samples clamp to the border voxel. Trilinear
interpolation over an axis-aligned grid factorizes into three single-axis
linear passes, which is what the implementation does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpacing, InvalidWindow, ShapeMismatch, ValidationError
from .volume import Volume3D, VolumeKind, require_same_grid

PET_WINDOW = (0.0, 20.0)     # SUV
CT_WINDOW = (-300.0, 400.0)  # HU
MIP_SPACING = (3.0, 3.0, 3.0)
MIP_SIZE = 224
SUV_CAP = 20.0


@dataclass(frozen=True)
class WindowSpec:
    """Clip ranges for the windowed CT/PET channels."""

    pet_lo: float = PET_WINDOW[0]
    pet_hi: float = PET_WINDOW[1]
    ct_lo: float = CT_WINDOW[0]
    ct_hi: float = CT_WINDOW[1]

    def __post_init__(self):
        if not (self.pet_lo < self.pet_hi):
            raise InvalidWindow(f"PET window requires lo < hi, got [{self.pet_lo}, {self.pet_hi}]")
        if not (self.ct_lo < self.ct_hi):
            raise InvalidWindow(f"CT window requires lo < hi, got [{self.ct_lo}, {self.ct_hi}]")


@dataclass(frozen=True)
class ChannelStack:
    """The 4-channel input representation: CT, PET, clipped CT, clipped PET."""

    channels: tuple[Volume3D, Volume3D, Volume3D, Volume3D]

    def __post_init__(self):
        first = self.channels[0]
        for ch in self.channels[1:]:
            require_same_grid(first, ch, "stack channels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels[0].shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.channels[0].spacing

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    @property
    def ct_raw(self) -> Volume3D:
        return self.channels[0]

    @property
    def pet_raw(self) -> Volume3D:
        return self.channels[1]

    @property
    def ct_clipped(self) -> Volume3D:
        return self.channels[2]

    @property
    def pet_clipped(self) -> Volume3D:
        return self.channels[3]


@dataclass(frozen=True)
class MipImage:
    """A fixed-size 2D projection image with its source pixel spacing."""

    pixels: np.ndarray
    source_spacing: tuple[float, float]

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ValidationError(f"MIP image must be 2D, got ndim={pixels.ndim}")
        object.__setattr__(self, "pixels", np.ascontiguousarray(pixels))
        object.__setattr__(self, "source_spacing", tuple(float(s) for s in self.source_spacing))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def _check_target(target) -> tuple[float, float, float]:
    if len(target) != 3:
        raise InvalidSpacing(f"target spacing needs 3 components, got {len(target)}")
    out = tuple(float(t) for t in target)
    if any(not np.isfinite(t) or t <= 0 for t in out):
        raise InvalidSpacing(f"target spacing must be positive and finite, got {out}")
    return out


def _output_shape(shape, spacing, target) -> tuple[int, ...]:
    # n' = max(1, round(n * s / t)), round half up
    return tuple(
        max(1, int(np.floor(n * s / t + 0.5))) for n, s, t in zip(shape, spacing, target)
    )


def _sample_coords(n_in: int, n_out: int, s: float, t: float) -> np.ndarray:
    u = (np.arange(n_out, dtype=np.float64) + 0.5) * (t / s) - 0.5
    return np.clip(u, 0.0, float(n_in - 1))


def _lerp_axis(data: np.ndarray, axis: int, n_out: int, s: float, t: float) -> np.ndarray:
    n_in = data.shape[axis]
    if n_in == 1:
        return np.take(data, np.zeros(n_out, dtype=np.intp), axis=axis)
    u = _sample_coords(n_in, n_out, s, t)
    i0 = np.minimum(np.floor(u).astype(np.intp), n_in - 2)
    frac = u - i0
    wshape = [1, 1, 1]
    wshape[axis] = n_out
    w1 = frac.reshape(wshape)
    w0 = 1.0 - w1
    lo = np.take(data, i0, axis=axis)
    np.multiply(lo, w0, out=lo)
    hi = np.take(data, i0 + 1, axis=axis)
    np.multiply(hi, w1, out=hi)
    lo += hi
    return lo


_SLAB_BUDGET_ELEMS = 1_500_000  # keep per-slab temporaries near 12 MB


def resample_trilinear(vol: Volume3D, target) -> Volume3D:
    """Resample a scalar volume to ``target`` spacing with trilinear weights.

    Not valid for LABEL volumes (use :func:`resample_nearest`). Resampling
    at the identical spacing returns a copy of the input. The output range
    is clipped to the input range, which the exact arithmetic already
    guarantees up to float rounding.

    Work proceeds in output z-slabs (z pass on the contiguous axis first,
    then x, then y) so transient buffers stay small enough for the
    allocator to recycle; the result is identical to a whole-volume pass.
    """
    if vol.kind is VolumeKind.LABEL:
        raise ValidationError("trilinear resampling is not defined for LABEL volumes")
    target = _check_target(target)
    if target == vol.spacing:
        return Volume3D(vol.data.copy(), vol.spacing, vol.kind)

    out_shape = _output_shape(vol.shape, vol.spacing, target)
    src = vol.data
    nx_in, ny_in, nz_in = src.shape
    nz_out = out_shape[2]

    uz = _sample_coords(nz_in, nz_out, vol.spacing[2], target[2])
    if nz_in == 1:
        z0 = np.zeros(nz_out, dtype=np.intp)
        fz = np.zeros(nz_out)
    else:
        z0 = np.minimum(np.floor(uz).astype(np.intp), nz_in - 2)
        fz = uz - z0

    # slab size such that the z-pass temporary (nx_in * ny_in * dz) stays small
    slab = max(1, min(nz_out, _SLAB_BUDGET_ELEMS // max(1, nx_in * ny_in)))
    out = np.empty(out_shape, dtype=np.float64)
    for k0 in range(0, nz_out, slab):
        k1 = min(k0 + slab, nz_out)
        if nz_in == 1:
            a = np.broadcast_to(src, (nx_in, ny_in, k1 - k0))
        else:
            z_lo = int(z0[k0])
            sub = src[:, :, z_lo : min(int(z0[k1 - 1]) + 1, nz_in - 1) + 1]
            i0 = z0[k0:k1] - z_lo
            f = fz[k0:k1].reshape(1, 1, -1)
            a = np.take(sub, i0, axis=2)
            np.multiply(a, 1.0 - f, out=a)
            hi = np.take(sub, np.minimum(i0 + 1, sub.shape[2] - 1), axis=2)
            np.multiply(hi, f, out=hi)
            a += hi
        a = _lerp_axis(a, 0, out_shape[0], vol.spacing[0], target[0])
        out[:, :, k0:k1] = _lerp_axis(a, 1, out_shape[1], vol.spacing[1], target[1])
    np.clip(out, src.min(), src.max(), out=out)
    return Volume3D(out, target, vol.kind)


def resample_nearest(vol: Volume3D, target) -> Volume3D:
    """Resample a LABEL volume with nearest-voxel-center lookup.

    Shares the grid geometry of :func:`resample_trilinear`; exact midpoint
    ties break toward the lower index.
    """
    if vol.kind is not VolumeKind.LABEL:
        raise ValidationError("nearest resampling is reserved for LABEL volumes")
    target = _check_target(target)
    if target == vol.spacing:
        return Volume3D(vol.data.copy(), vol.spacing, vol.kind)

    out_shape = _output_shape(vol.shape, vol.spacing, target)
    data = vol.data
    for axis in range(3):
        u = _sample_coords(data.shape[axis], out_shape[axis], vol.spacing[axis], target[axis])
        idx = np.ceil(u - 0.5).astype(np.intp)  # round half down => lower-index ties
        np.clip(idx, 0, data.shape[axis] - 1, out=idx)
        data = np.take(data, idx, axis=axis)
    return Volume3D(data, target, vol.kind)


def clip_intensity(vol: Volume3D, lo: float, hi: float) -> Volume3D:
    """Clamp every voxel to [lo, hi]; shape, spacing and kind are preserved."""
    if not lo < hi:
        raise InvalidWindow(f"clip window requires lo < hi, got [{lo}, {hi}]")
    return vol.with_data(np.clip(vol.data, lo, hi))


def build_channels(ct: Volume3D, pet: Volume3D, window: WindowSpec = WindowSpec()) -> ChannelStack:
    """Assemble [CT, PET, clipped CT, clipped PET] on a shared grid."""
    require_same_grid(ct, pet, "ct/pet")
    return ChannelStack(
        (
            ct,
            pet,
            clip_intensity(ct, window.ct_lo, window.ct_hi),
            clip_intensity(pet, window.pet_lo, window.pet_hi),
        )
    )


def mip_coronal(vol: Volume3D) -> np.ndarray:
    """Maximum intensity projection along the anterior-posterior (y) axis.

    Returns an (nx, nz) image.
    """
    if vol.kind is not VolumeKind.PET_SUV:
        raise ValidationError(f"coronal MIP expects a PET volume, got {vol.kind.name}")
    return vol.data.max(axis=1)


def crop_pad_center(
    img: np.ndarray, out_size: int = MIP_SIZE, source_spacing: tuple[float, float] = (1.0, 1.0)
) -> MipImage:
    """Center ``img`` inside a zero-filled out_size x out_size frame.

    The input's center pixel floor(n/2) lands at output index
    floor(out_size/2) on each axis; larger inputs are center-cropped with
    the same convention.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValidationError(f"expected a non-empty 2D image, got shape {img.shape}")

    out = np.zeros((out_size, out_size), dtype=np.float64)
    src = [slice(None)] * 2
    dst = [slice(None)] * 2
    for axis, n in enumerate(img.shape):
        if n <= out_size:
            off = out_size // 2 - n // 2
            src[axis] = slice(0, n)
            dst[axis] = slice(off, off + n)
        else:
            start = n // 2 - out_size // 2
            src[axis] = slice(start, start + out_size)
            dst[axis] = slice(0, out_size)
    out[tuple(dst)] = img[tuple(src)]
    return MipImage(out, source_spacing)


def normalize_mip(m: MipImage, cap: float = SUV_CAP) -> MipImage:
    """Cap pixel values at ``cap`` and scale into [0, 1]."""
    return MipImage(np.minimum(m.pixels, cap) / cap, m.source_spacing)


def discriminator_mip(
    pet: Volume3D,
    spacing=MIP_SPACING,
    out_size: int = MIP_SIZE,
    cap: float = SUV_CAP,
) -> MipImage:
    """Full tracer-classifier input pipeline: resample, project, pad, scale."""
    resampled = resample_trilinear(pet, spacing)
    img = mip_coronal(resampled)
    mip = crop_pad_center(img, out_size, (resampled.spacing[0], resampled.spacing[2]))
    return normalize_mip(mip, cap)
