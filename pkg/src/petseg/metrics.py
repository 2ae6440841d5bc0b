"""Challenge evaluation: Dice, false-positive and false-negative volume.

False-positive volume sums the sizes of predicted connected components
with zero ground-truth overlap; false-negative volume is the symmetric
quantity on ground-truth components. Components use 26-connectivity by
default and are numbered 1..K in first-encounter order of the x-fastest
scan. Volumes are reported both as raw voxel counts and millilitres.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nifti
from .errors import ValidationError
from .volume import BinaryMask, Volume3D, VolumeKind, require_same_grid

CONNECTIVITIES = (6, 18, 26)


def _prior_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    """Neighbor offsets that precede a voxel in x-fastest scan order."""
    if connectivity not in CONNECTIVITIES:
        raise ValidationError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity}")
    max_nonzero = {6: 1, 18: 2, 26: 3}[connectivity]
    out = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz, dy, dx) == (0, 0, 0):
                    continue
                if abs(dx) + abs(dy) + abs(dz) > max_nonzero:
                    continue
                if dz < 0 or (dz == 0 and dy < 0) or (dz == 0 and dy == 0 and dx < 0):
                    out.append((dx, dy, dz))
    return out


def _neighbor_pairs(mask: np.ndarray, offset: tuple[int, int, int]):
    """Flat x-fastest indices of foreground voxels adjacent under ``offset``."""
    nx, ny, nz = mask.shape
    dx, dy, dz = offset
    sl_a = []
    sl_b = []
    for d, n in zip((dx, dy, dz), (nx, ny, nz)):
        if d < 0:
            sl_a.append(slice(-d, n))
            sl_b.append(slice(0, n + d))
        else:
            sl_a.append(slice(0, n - d))
            sl_b.append(slice(d, n))
    both = mask[tuple(sl_a)] & mask[tuple(sl_b)]
    ax, ay, az = np.nonzero(both)
    if ax.size == 0:
        return None
    ia = (ax + sl_a[0].start) + nx * ((ay + sl_a[1].start) + ny * (az + sl_a[2].start))
    ib = (ax + sl_b[0].start) + nx * ((ay + sl_b[1].start) + ny * (az + sl_b[2].start))
    return ia, ib


def connected_components(mask: BinaryMask, connectivity: int = 26):
    """Two-pass union-find labeling of a binary mask.

    Returns (labels, count): a LABEL volume with background 0 and
    components numbered 1..count in first-encounter scan order.
    """
    m = mask.mask
    fg_flat = np.flatnonzero(m.flatten(order="F"))  # sorted = x-fastest scan order
    labels = np.zeros(m.shape, dtype=np.int32)
    if fg_flat.size == 0:
        return Volume3D(labels, mask.spacing, VolumeKind.LABEL), 0

    parent = np.arange(fg_flat.size, dtype=np.intp)
    par = parent  # local alias for the union loop

    def find(i):
        while par[i] != i:
            par[i] = par[par[i]]  # path halving
            i = par[i]
        return i

    for offset in _prior_offsets(connectivity):
        pairs = _neighbor_pairs(m, offset)
        if pairs is None:
            continue
        ia = np.searchsorted(fg_flat, pairs[0])
        ib = np.searchsorted(fg_flat, pairs[1])
        for a, b in zip(ia.tolist(), ib.tolist()):
            ra = find(a)
            rb = find(b)
            if ra != rb:
                if ra < rb:
                    par[rb] = ra
                else:
                    par[ra] = rb

    # vectorized pointer jumping to full root resolution
    while True:
        nxt = par[par]
        if np.array_equal(nxt, par):
            break
        par = nxt

    # renumber roots by first occurrence in scan order
    roots, first_pos = np.unique(par, return_index=True)
    order = np.argsort(first_pos, kind="stable")
    root_label = np.empty(fg_flat.size, dtype=np.int32)
    root_label[roots[order]] = np.arange(1, roots.size + 1, dtype=np.int32)

    flat_labels = np.zeros(m.size, dtype=np.int32)
    flat_labels[fg_flat] = root_label[par]
    labels = np.ascontiguousarray(flat_labels.reshape(m.shape, order="F"))
    return Volume3D(labels, mask.spacing, VolumeKind.LABEL), int(roots.size)


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float | None            # None when both masks are empty
    fpv_voxels: int
    fpv_ml: float
    fnv_voxels: int
    fnv_ml: float
    n_pred_components: int
    n_gt_components: int

    @property
    def dice_defined(self) -> bool:
        return self.dice is not None


def dice(pred: BinaryMask, gt: BinaryMask) -> float | None:
    """2|P∩G| / (|P|+|G|); None when both masks are empty, 0.0 when
    exactly one is."""
    require_same_grid(pred, gt, "pred/gt masks")
    p = pred.voxel_count
    g = gt.voxel_count
    if p == 0 and g == 0:
        return None
    inter = int(np.count_nonzero(pred.mask & gt.mask))
    return 2.0 * inter / (p + g)


def _missed_voxels_from_labels(labels: np.ndarray, count: int, other_fg: np.ndarray) -> int:
    """Total size of labeled components with zero overlap in ``other_fg``."""
    if count == 0:
        return 0
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    overlapping = np.unique(labels[other_fg])
    missed = np.ones(count + 1, dtype=bool)
    missed[0] = False
    missed[overlapping] = False
    return int(sizes[missed].sum())


def false_positive_volume(pred: BinaryMask, gt: BinaryMask, connectivity: int = 26):
    """(voxels, mL) of predicted components that touch no ground truth."""
    require_same_grid(pred, gt, "pred/gt masks")
    labels, count = connected_components(pred, connectivity)
    voxels = _missed_voxels_from_labels(labels.data, count, gt.mask)
    return voxels, voxels * pred.voxel_volume_mm3 / 1000.0


def false_negative_volume(pred: BinaryMask, gt: BinaryMask, connectivity: int = 26):
    """(voxels, mL) of ground-truth components the prediction misses."""
    require_same_grid(pred, gt, "pred/gt masks")
    labels, count = connected_components(gt, connectivity)
    voxels = _missed_voxels_from_labels(labels.data, count, pred.mask)
    return voxels, voxels * gt.voxel_volume_mm3 / 1000.0


def compute_case_metrics(pred: BinaryMask, gt: BinaryMask, case_id: str = "case",
                         connectivity: int = 26) -> CaseMetrics:
    require_same_grid(pred, gt, "pred/gt masks")
    pred_labels, n_pred = connected_components(pred, connectivity)
    gt_labels, n_gt = connected_components(gt, connectivity)
    fpv_vox = _missed_voxels_from_labels(pred_labels.data, n_pred, gt.mask)
    fnv_vox = _missed_voxels_from_labels(gt_labels.data, n_gt, pred.mask)
    return CaseMetrics(
        case_id=case_id,
        dice=dice(pred, gt),
        fpv_voxels=fpv_vox,
        fpv_ml=fpv_vox * pred.voxel_volume_mm3 / 1000.0,
        fnv_voxels=fnv_vox,
        fnv_ml=fnv_vox * gt.voxel_volume_mm3 / 1000.0,
        n_pred_components=n_pred,
        n_gt_components=n_gt,
    )


def evaluate_case(pred_path, gt_path, case_id: str | None = None, connectivity: int = 26,
                  lesion_label: int | None = None) -> CaseMetrics:
    """Load two label volumes and compute all per-case metrics.

    Foreground is ``voxel == lesion_label`` when given, else any nonzero
    voxel.
    """
    pred_vol = nifti.read_volume(pred_path, kind=VolumeKind.LABEL)
    gt_vol = nifti.read_volume(gt_path, kind=VolumeKind.LABEL)
    require_same_grid(pred_vol, gt_vol, "pred/gt volumes")
    if lesion_label is None:
        pred = BinaryMask.from_volume_foreground(pred_vol)
        gt = BinaryMask.from_volume_foreground(gt_vol)
    else:
        pred = BinaryMask.from_label_volume(pred_vol, lesion_label)
        gt = BinaryMask.from_label_volume(gt_vol, lesion_label)
    if case_id is None:
        case_id = Path(pred_path).name.split(".")[0]
    return compute_case_metrics(pred, gt, case_id, connectivity)


CSV_HEADER = [
    "case_id", "dice", "dice_defined", "fpv_voxels", "fpv_ml",
    "fnv_voxels", "fnv_ml", "n_pred_cc", "n_gt_cc",
]


def _row(m: CaseMetrics) -> list[str]:
    return [
        m.case_id,
        f"{m.dice:.6f}" if m.dice is not None else "nan",
        "1" if m.dice_defined else "0",
        str(m.fpv_voxels),
        f"{m.fpv_ml:.6f}",
        str(m.fnv_voxels),
        f"{m.fnv_ml:.6f}",
        str(m.n_pred_components),
        str(m.n_gt_components),
    ]


def write_metrics_csv(path, cases, include_mean: bool = True) -> None:
    """One row per case plus a trailing mean row.

    The mean Dice covers defined cases only; other columns average over all
    cases.
    """
    cases = list(cases)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for m in cases:
            writer.writerow(_row(m))
        if include_mean and cases:
            defined = [m.dice for m in cases if m.dice is not None]
            mean_dice = float(np.mean(defined)) if defined else float("nan")
            writer.writerow([
                "mean",
                f"{mean_dice:.6f}",
                str(len(defined)),
                f"{np.mean([m.fpv_voxels for m in cases]):.6f}",
                f"{np.mean([m.fpv_ml for m in cases]):.6f}",
                f"{np.mean([m.fnv_voxels for m in cases]):.6f}",
                f"{np.mean([m.fnv_ml for m in cases]):.6f}",
                f"{np.mean([m.n_pred_components for m in cases]):.6f}",
                f"{np.mean([m.n_gt_components for m in cases]):.6f}",
            ])
