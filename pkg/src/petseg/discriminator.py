"""Tracer classification from coronal MIP images.

The reference architecture is six stride-2 3x3 convolutions (224 -> 4)
followed by five fully connected layers, ReLU activations throughout and a
final sigmoid. Class mapping is fixed project-wide: FDG = 0, PSMA = 1;
the decision threshold is 0.5 with ties going to PSMA.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import nifti
from .errors import DivergedLoss, EmptySplit, IoFailure, TooFewSamples, ValidationError
from .nn import (
    AdamW,
    Conv2DSpec,
    FlattenSpec,
    LinearSpec,
    Network,
    ReLUSpec,
    SigmoidSpec,
    bce_with_logits,
    load_model,
    save_model,
    sigmoid,
)
from .preprocess import MipImage
from .volume import Volume3D, VolumeKind


class Tracer(IntEnum):
    FDG = 0
    PSMA = 1


INPUT_SHAPE = (1, 224, 224)

# Six stride-2 convs bring 224 down to 4; 64*4*4 = 1024 feeds the head.
DEFAULT_ARCH = (
    Conv2DSpec(1, 8, 3, 2, 1), ReLUSpec(),
    Conv2DSpec(8, 16, 3, 2, 1), ReLUSpec(),
    Conv2DSpec(16, 32, 3, 2, 1), ReLUSpec(),
    Conv2DSpec(32, 64, 3, 2, 1), ReLUSpec(),
    Conv2DSpec(64, 64, 3, 2, 1), ReLUSpec(),
    Conv2DSpec(64, 64, 3, 2, 1), ReLUSpec(),
    FlattenSpec(),
    LinearSpec(1024, 256), ReLUSpec(),
    LinearSpec(256, 64), ReLUSpec(),
    LinearSpec(64, 32), ReLUSpec(),
    LinearSpec(32, 16), ReLUSpec(),
    LinearSpec(16, 1),
    SigmoidSpec(),
)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 16
    val_fraction: float = 0.2
    weight_decay: float = 0.01
    seed: int = 0


@dataclass(frozen=True)
class LabeledMip:
    image: MipImage
    label: int
    case_id: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 (FDG) or 1 (PSMA), got {self.label}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_bce: float
    val_bce: float
    val_acc: float


@dataclass(frozen=True)
class TracerPrediction:
    probability: float
    tracer: Tracer
    wall_time_s: float


class DiscriminatorModel:
    """A trained (or fresh) classifier: network weights plus provenance."""

    def __init__(self, network: Network, seed: int | None = None):
        self.network = network
        self.seed = seed

    @classmethod
    def fresh(cls, seed: int, specs=DEFAULT_ARCH) -> "DiscriminatorModel":
        rng = np.random.default_rng(seed)
        return cls(Network(specs, rng, input_shape=INPUT_SHAPE), seed=seed)

    def save(self, manifest_path) -> None:
        save_model(manifest_path, self.network.parameters(), self.network.specs, seed=self.seed)

    @classmethod
    def load(cls, manifest_path) -> "DiscriminatorModel":
        params, specs, manifest = load_model(manifest_path)
        model = cls.fresh(seed=manifest.get("seed") or 0, specs=specs)
        model.network.set_parameters(params)
        model.seed = manifest.get("seed")
        return model


def _to_batch(mips) -> np.ndarray:
    return np.stack([m.image.pixels for m in mips])[:, None, :, :]


def _eval_batches(network: Network, x: np.ndarray, y: np.ndarray, batch_size: int):
    """Mean fused BCE and decision accuracy over ``x`` in batches."""
    total_loss = 0.0
    correct = 0
    for i in range(0, x.shape[0], batch_size):
        z = network.forward_logits(x[i : i + batch_size])
        loss, _ = bce_with_logits(z, y[i : i + batch_size])
        total_loss += float(loss.sum())
        pred = sigmoid(z) >= 0.5
        correct += int(np.count_nonzero(pred == (y[i : i + batch_size] >= 0.5)))
    return total_loss / x.shape[0], correct / x.shape[0]


def train_fold(train, val, cfg: TrainConfig = TrainConfig(), specs=DEFAULT_ARCH):
    """Minimize mean BCE with AdamW; early-stop on the validation loss.

    Stops when validation BCE fails to improve by more than 1e-6 for
    ``cfg.patience`` consecutive epochs, or at ``cfg.max_epochs``. Returns
    (model, history) where the model carries the best-validation-epoch
    parameters, not the last ones.
    """
    if not train or not val:
        raise EmptySplit(f"need non-empty splits, got {len(train)} train / {len(val)} val")
    overlap = {m.case_id for m in train} & {m.case_id for m in val}
    if overlap:
        raise ValidationError(f"train/val case_ids overlap: {sorted(overlap)[:5]}")

    rng = np.random.default_rng(cfg.seed)
    network = Network(specs, rng, input_shape=INPUT_SHAPE)
    opt = AdamW(network.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    x_train = _to_batch(train)
    y_train = np.array([[m.label] for m in train], dtype=np.float64)
    x_val = _to_batch(val)
    y_val = np.array([[m.label] for m in val], dtype=np.float64)

    history: list[EpochStats] = []
    best_val = np.inf
    best_params = network.snapshot()
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(train))
        epoch_loss = 0.0
        for i in range(0, len(train), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            z = network.forward_logits(x_train[idx])
            loss, dz = bce_with_logits(z, y_train[idx])
            network.backward_from_logits(dz / loss.size)
            opt.step(network.gradients())
            epoch_loss += float(loss.sum())
        train_bce = epoch_loss / len(train)

        val_bce, val_acc = _eval_batches(network, x_val, y_val, cfg.batch_size)
        if np.isnan(val_bce):
            raise DivergedLoss(f"validation BCE is NaN at epoch {epoch}")
        history.append(EpochStats(epoch, train_bce, val_bce, val_acc))

        if val_bce < best_val - 1e-6:
            best_val = val_bce
            best_params = network.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break

    network.set_parameters(best_params)
    return DiscriminatorModel(network, seed=cfg.seed), history


@dataclass(frozen=True)
class CVResult:
    fold_accuracies: tuple[float, ...]
    mean_accuracy: float
    fold_case_ids: tuple[tuple[str, ...], ...]
    histories: tuple[tuple[EpochStats, ...], ...]


def stratified_folds(data, k: int, seed: int) -> list[list[int]]:
    """Deterministic stratified partition: shuffle once per class, slice."""
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for label in (0, 1):
        idx = np.array([i for i, m in enumerate(data) if m.label == label], dtype=int)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        for f, chunk in enumerate(np.array_split(idx, k)):
            folds[f].extend(int(i) for i in chunk)
    return folds


def cross_validate(data, k: int = 5, cfg: TrainConfig = TrainConfig(), specs=DEFAULT_ARCH) -> CVResult:
    """Stratified k-fold cross-validation of the tracer classifier.

    Accuracy per fold is the fraction of held-out cases whose thresholded
    probability matches the label.
    """
    if k < 2:
        raise ValidationError(f"need k >= 2 folds, got {k}")
    if len(data) < k:
        raise TooFewSamples(f"need at least {k} samples for {k}-fold CV, got {len(data)}")

    folds = stratified_folds(data, k, cfg.seed)
    accuracies = []
    fold_cases = []
    histories = []
    for f in range(k):
        held = [data[i] for i in folds[f]]
        rest = [data[i] for g in range(k) if g != f for i in folds[g]]
        fold_seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(f,)).generate_state(1)[0])
        fold_rng = np.random.default_rng(fold_seed)

        perm = fold_rng.permutation(len(rest))
        n_val = min(max(1, round(cfg.val_fraction * len(rest))), len(rest) - 1)
        val = [rest[i] for i in perm[:n_val]]
        tr = [rest[i] for i in perm[n_val:]]

        model, history = train_fold(tr, val, replace(cfg, seed=fold_seed), specs=specs)
        x_held = _to_batch(held)
        y_held = np.array([[m.label] for m in held], dtype=np.float64)
        _, acc = _eval_batches(model.network, x_held, y_held, cfg.batch_size)

        accuracies.append(acc)
        fold_cases.append(tuple(m.case_id for m in held))
        histories.append(tuple(history))

    return CVResult(
        fold_accuracies=tuple(accuracies),
        mean_accuracy=float(np.mean(accuracies)),
        fold_case_ids=tuple(fold_cases),
        histories=tuple(histories),
    )


def predict_tracer(model: DiscriminatorModel, mip: MipImage) -> TracerPrediction:
    """Classify one MIP; probability >= 0.5 means PSMA (ties included)."""
    x = mip.pixels[None, None, :, :]
    t0 = time.perf_counter()
    p = float(model.network.forward(x)[0, 0])
    wall = time.perf_counter() - t0
    return TracerPrediction(p, Tracer.PSMA if p >= 0.5 else Tracer.FDG, wall)


# ---------------------------------------------------------------------------
# dataset manifest and history I/O

def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_bce", "val_bce", "val_acc"])
        for row in history:
            writer.writerow([row.epoch, f"{row.train_bce:.6f}", f"{row.val_bce:.6f}", f"{row.val_acc:.6f}"])


def save_mip_dataset(out_dir, mips, manifest_name: str = "mip_manifest.json") -> Path:
    """Write MIP images as float32 NIfTI plus the JSON training manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for m in mips:
        fname = f"{m.case_id}_mip.nii.gz"
        sx, sz = m.image.source_spacing
        vol = Volume3D(m.image.pixels[:, :, None], (sx, sz, 1.0), VolumeKind.PET_SUV)
        nifti.write_volume(vol, out_dir / fname)
        entries.append({"case_id": m.case_id, "mip_path": fname, "label": int(m.label)})
    manifest_path = out_dir / manifest_name
    manifest_path.write_text(json.dumps(entries, indent=2) + "\n")
    return manifest_path


def load_mip_dataset(manifest_path) -> list[LabeledMip]:
    """Load a manifest of {case_id, mip_path, label} entries.

    ``mip_path`` may point at a 2D NIfTI (nx, nz, 1) or a raw little-endian
    float32 grid of 224 x 224 values; paths are relative to the manifest.
    """
    manifest_path = Path(manifest_path)
    try:
        entries = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read manifest {manifest_path}: {exc}") from exc
    mips = []
    for e in entries:
        path = manifest_path.parent / e["mip_path"]
        if str(path).endswith((".nii", ".nii.gz")):
            vol = nifti.read_volume(path, kind=VolumeKind.PET_SUV)
            if vol.shape[2] != 1:
                raise ValidationError(f"{path}: expected a single-slice volume, got {vol.shape}")
            pixels = vol.data[:, :, 0]
            spacing = (vol.spacing[0], vol.spacing[1])
        else:
            raw = np.fromfile(path, dtype="<f4")
            side = int(round(np.sqrt(raw.size)))
            if side * side != raw.size:
                raise ValidationError(f"{path}: raw grid of {raw.size} floats is not square")
            pixels = raw.reshape(side, side).astype(np.float64)
            spacing = (1.0, 1.0)
        mips.append(LabeledMip(MipImage(pixels, spacing), int(e["label"]), str(e["case_id"])))
    return mips
