"""Command-line interface: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 validation error,
4 predictor failure. ``predict-tracer`` signals its decision through the
exit code (10 = FDG, 11 = PSMA) so shell pipelines can route without
parsing. With ``--json``, errors are emitted as one JSON object on stderr.
Configuration precedence is flags > config file (JSON) > built-in
defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, nifti
from .discriminator import (
    DiscriminatorModel,
    TrainConfig,
    Tracer,
    cross_validate,
    load_mip_dataset,
    predict_tracer,
    save_mip_dataset,
    train_fold,
    write_history_csv,
)
from .errors import IoFailure, PetsegError, PredictorFailure, ValidationError
from .fusion import load_organ_manifest, merge_organ_masks
from .manifest import write_run_manifest
from .metrics import evaluate_case, write_metrics_csv
from .orchestrator import (
    ALL_FLIPS,
    EnsembleConfig,
    ExternalPredictor,
    SuvThresholdPredictor,
    route,
)
from .preprocess import (
    CT_WINDOW,
    MIP_SIZE,
    MIP_SPACING,
    PET_WINDOW,
    SUV_CAP,
    WindowSpec,
    build_channels,
    crop_pad_center,
    discriminator_mip,
    mip_coronal,
    resample_nearest,
    resample_trilinear,
)
from .synthdata import TracerStyle, make_phantom, random_phantom_spec
from .volume import Volume3D, VolumeKind

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_PREDICTOR = 4
EXIT_FDG = 10
EXIT_PSMA = 11


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _spacing_triple(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected sx,sy,sz, got {text!r}")
    return tuple(parts)


def _flip_list(text: str):
    return tuple(f.strip() for f in text.split(",") if f.strip())


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return doc


def _merge_train_config(args) -> TrainConfig:
    """flags > config file > TrainConfig defaults."""
    merged = dataclasses.asdict(TrainConfig())
    file_cfg = _load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(merged)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    merged.update(file_cfg)
    for key in merged:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return TrainConfig(**merged)


def _print_json_error(exc: BaseException):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(doc), file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands

def cmd_inspect(args) -> int:
    buf = nifti._read_bytes(args.volume)
    header = nifti.parse_header(buf)
    vol = nifti.read_volume(args.volume)
    print(f"path:        {args.volume}")
    print(f"shape:       {header.shape}")
    print(f"spacing_mm:  {tuple(round(s, 6) for s in header.spacing)}")
    print(f"datatype:    code {header.datatype_code} ({nifti.SUPPORTED_DATATYPES[header.datatype_code][0]})")
    print(f"byteorder:   {'little' if header.byteorder == '<' else 'big'}")
    print(f"vox_offset:  {header.vox_offset:.0f}")
    print(f"scl_slope:   {header.scl_slope}")
    print(f"scl_inter:   {header.scl_inter}")
    print(f"magic:       {header.magic!r}")
    data = vol.data
    print(f"min/max:     {data.min():.6g} / {data.max():.6g}")
    print(f"mean:        {data.mean():.6g}")
    print(f"nonzero:     {int(np.count_nonzero(data))} of {data.size}")
    return EXIT_OK


def cmd_resample(args) -> int:
    t0 = time.perf_counter()
    if args.mode == "nearest":
        vol = nifti.read_volume(args.infile, kind=VolumeKind.LABEL)
        out = resample_nearest(vol, args.spacing)
    else:
        vol = nifti.read_volume(args.infile)
        out = resample_trilinear(vol, args.spacing)
    nifti.write_volume(out, args.out)
    write_run_manifest(
        args.out, "resample",
        {"in": str(args.infile), "out": str(args.out), "spacing": list(args.spacing), "mode": args.mode},
        inputs=[args.infile],
        timings={"total_s": time.perf_counter() - t0},
    )
    print(f"resampled {vol.shape} -> {out.shape} at {args.spacing} mm")
    return EXIT_OK


def cmd_window(args) -> int:
    t0 = time.perf_counter()
    window = WindowSpec(args.pet_lo, args.pet_hi, args.ct_lo, args.ct_hi)
    ct = nifti.read_volume(args.ct, kind=VolumeKind.CT_HU)
    pet = nifti.read_volume(args.pet, kind=VolumeKind.PET_SUV)
    stack = build_channels(ct, pet, window)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = ["channel_0_ct.nii.gz", "channel_1_pet.nii.gz",
             "channel_2_ct_clipped.nii.gz", "channel_3_pet_clipped.nii.gz"]
    for name, ch in zip(names, stack.channels):
        nifti.write_volume(ch, out_dir / name)
    write_run_manifest(
        out_dir, "window",
        {"ct": str(args.ct), "pet": str(args.pet), "out_dir": str(out_dir),
         "window": dataclasses.asdict(window), "channels": names},
        inputs=[args.ct, args.pet],
        timings={"total_s": time.perf_counter() - t0},
    )
    print(f"wrote 4 channels to {out_dir}")
    return EXIT_OK


def cmd_mip(args) -> int:
    t0 = time.perf_counter()
    pet = nifti.read_volume(args.pet, kind=VolumeKind.PET_SUV)
    if args.raw:
        resampled = resample_trilinear(pet, args.spacing)
        mip = crop_pad_center(mip_coronal(resampled), args.size,
                              (resampled.spacing[0], resampled.spacing[2]))
    else:
        mip = discriminator_mip(pet, spacing=args.spacing, out_size=args.size, cap=args.cap)
    sx, sz = mip.source_spacing
    vol = Volume3D(mip.pixels[:, :, None], (sx, sz, 1.0), VolumeKind.PET_SUV)
    nifti.write_volume(vol, args.out)
    write_run_manifest(
        args.out, "mip",
        {"pet": str(args.pet), "out": str(args.out), "spacing": list(args.spacing),
         "size": args.size, "cap": args.cap, "raw": bool(args.raw)},
        inputs=[args.pet],
        timings={"total_s": time.perf_counter() - t0},
    )
    print(f"wrote {mip.shape[0]}x{mip.shape[1]} MIP to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mips = []
    for i in range(args.n):
        style = TracerStyle.FDG_LIKE if i % 2 == 0 else TracerStyle.PSMA_LIKE
        item_seed = int(np.random.SeedSequence(args.seed, spawn_key=(i,)).generate_state(1)[0])
        spec = random_phantom_spec(style, item_seed)
        pet, ct, lesion = make_phantom(spec)
        case_id = f"synth_{i:04d}"
        if args.with_volumes:
            nifti.write_volume(pet, out_dir / f"{case_id}_pet.nii.gz")
            nifti.write_volume(ct, out_dir / f"{case_id}_ct.nii.gz")
            nifti.write_volume(lesion.to_label_volume(), out_dir / f"{case_id}_lesion.nii.gz")
        mip = discriminator_mip(pet)
        from .discriminator import LabeledMip

        mips.append(LabeledMip(mip, 0 if style is TracerStyle.FDG_LIKE else 1, case_id))
    manifest_path = save_mip_dataset(out_dir, mips)
    write_run_manifest(
        out_dir, "synth",
        {"n": args.n, "seed": args.seed, "out_dir": str(out_dir),
         "with_volumes": bool(args.with_volumes), "jobs": args.jobs},
        seed=args.seed,
        timings={"total_s": time.perf_counter() - t0},
        extra={"mip_manifest": manifest_path.name},
    )
    print(f"generated {args.n} cases into {out_dir} (manifest: {manifest_path.name})")
    return EXIT_OK


def cmd_train_disc(args) -> int:
    t0 = time.perf_counter()
    cfg = _merge_train_config(args)
    data = load_mip_dataset(args.manifest)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(data))
    n_val = min(max(1, round(cfg.val_fraction * len(data))), max(1, len(data) - 1))
    val = [data[i] for i in perm[:n_val]]
    train = [data[i] for i in perm[n_val:]]
    model, history = train_fold(train, val, cfg)
    model.save(args.out_model)
    history_path = args.history or str(Path(args.out_model).with_suffix("")) + "_history.csv"
    write_history_csv(history_path, history)
    write_run_manifest(
        args.out_model, "train-disc",
        {"manifest": str(args.manifest), "out_model": str(args.out_model),
         "history": str(history_path), **dataclasses.asdict(cfg)},
        inputs=[args.manifest],
        seed=cfg.seed,
        timings={"total_s": time.perf_counter() - t0},
        extra={"epochs_run": len(history), "best_val_bce": min(h.val_bce for h in history)},
    )
    best = min(history, key=lambda h: h.val_bce)
    print(f"trained on {len(train)}+{len(val)} mips, {len(history)} epochs, "
          f"best val BCE {best.val_bce:.6f} (epoch {best.epoch}), val acc {best.val_acc:.4f}")
    return EXIT_OK


def cmd_cv_disc(args) -> int:
    t0 = time.perf_counter()
    cfg = _merge_train_config(args)
    data = load_mip_dataset(args.manifest)
    result = cross_validate(data, k=args.k, cfg=cfg)
    for i, acc in enumerate(result.fold_accuracies):
        print(f"fold {i}: accuracy {acc:.4f} ({len(result.fold_case_ids[i])} held out)")
    print(f"mean accuracy: {result.mean_accuracy:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("fold,accuracy,held_out\n")
            for i, acc in enumerate(result.fold_accuracies):
                fh.write(f"{i},{acc:.6f},{len(result.fold_case_ids[i])}\n")
            fh.write(f"mean,{result.mean_accuracy:.6f},{len(data)}\n")
        write_run_manifest(
            args.out, "cv-disc",
            {"manifest": str(args.manifest), "k": args.k, "out": str(args.out),
             **dataclasses.asdict(cfg)},
            inputs=[args.manifest],
            seed=cfg.seed,
            timings={"total_s": time.perf_counter() - t0},
            extra={"fold_accuracies": [round(a, 6) for a in result.fold_accuracies],
                   "mean_accuracy": round(result.mean_accuracy, 6)},
        )
    return EXIT_OK


def cmd_predict_tracer(args) -> int:
    model = DiscriminatorModel.load(args.model)
    pet = nifti.read_volume(args.pet, kind=VolumeKind.PET_SUV)
    mip = discriminator_mip(pet, spacing=args.spacing, cap=args.cap)
    prediction = predict_tracer(model, mip)
    print(f"tracer={prediction.tracer.name} probability={prediction.probability:.6f} "
          f"wall_time_s={prediction.wall_time_s:.4f}")
    return EXIT_PSMA if prediction.tracer is Tracer.PSMA else EXIT_FDG


def cmd_fuse(args) -> int:
    t0 = time.perf_counter()
    from .volume import BinaryMask

    case_id, lesion_path, organ_paths = load_organ_manifest(args.manifest)
    lesion = BinaryMask.from_volume_foreground(nifti.read_volume(lesion_path, kind=VolumeKind.LABEL))
    masks = []
    for name, path in sorted(organ_paths.items()):
        vol = nifti.read_volume(path, kind=VolumeKind.LABEL)
        masks.append((name, BinaryMask.from_volume_foreground(vol)))
    fused = merge_organ_masks(masks, lesion, ignore_unknown=args.ignore_unknown)
    nifti.write_volume(fused, args.out)
    write_run_manifest(
        args.out, "fuse",
        {"manifest": str(args.manifest), "out": str(args.out), "case_id": case_id,
         "ignore_unknown": bool(args.ignore_unknown)},
        inputs=[args.manifest, lesion_path, *organ_paths.values()],
        timings={"total_s": time.perf_counter() - t0},
    )
    print(f"fused {len(masks)} organ masks + lesion for case {case_id} -> {args.out}")
    return EXIT_OK


def _evaluate_pair(pred_path, gt_path, case_id, connectivity, lesion_label):
    return evaluate_case(pred_path, gt_path, case_id=case_id, connectivity=connectivity,
                         lesion_label=lesion_label)


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    pred_files = {p.name: p for p in sorted(pred_dir.glob("*.nii*"))}
    gt_files = {p.name: p for p in sorted(gt_dir.glob("*.nii*"))}
    common = sorted(set(pred_files) & set(gt_files))
    if not common:
        raise ValidationError(f"no matching .nii files between {pred_dir} and {gt_dir}")

    jobs = max(1, args.jobs)
    tasks = [(pred_files[n], gt_files[n], n.split(".")[0]) for n in common]
    if jobs == 1:
        cases = [_evaluate_pair(p, g, c, args.connectivity, args.lesion_label) for p, g, c in tasks]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cases = list(pool.map(
                lambda t: _evaluate_pair(t[0], t[1], t[2], args.connectivity, args.lesion_label),
                tasks,
            ))
    write_metrics_csv(args.out, cases)
    write_run_manifest(
        args.out, "evaluate",
        {"pred_dir": str(pred_dir), "gt_dir": str(gt_dir), "out": str(args.out),
         "connectivity": args.connectivity, "lesion_label": args.lesion_label, "jobs": jobs},
        inputs=[pred_files[n] for n in common] + [gt_files[n] for n in common],
        timings={"total_s": time.perf_counter() - t0},
    )
    defined = [c.dice for c in cases if c.dice is not None]
    mean_dice = float(np.mean(defined)) if defined else float("nan")
    print(f"evaluated {len(cases)} cases -> {args.out} (mean dice over "
          f"{len(defined)} defined: {mean_dice:.4f})")
    return EXIT_OK


_ENSEMBLE_KEYS = {
    "folds", "backend", "tta_flips", "reduced_flips", "tta_reduction_threshold",
    "time_budget_s", "decision_threshold", "soft_deadline",
}


def _build_ensemble(cfg: dict, case_id: str) -> EnsembleConfig:
    backend = cfg.get("backend", {"kind": "suv_threshold"})
    n_folds = int(cfg.get("folds", 6))
    if n_folds < 1:
        raise ValidationError(f"folds must be >= 1, got {n_folds}")
    if backend.get("kind", "suv_threshold") == "suv_threshold":
        folds = tuple(
            SuvThresholdPredictor(cap=float(backend.get("cap", SUV_CAP)), name=f"suv_threshold_f{i}")
            for i in range(n_folds)
        )
    elif backend["kind"] == "external":
        command = backend.get("command")
        if not command:
            raise ValidationError("external backend needs a 'command' list")
        folds = tuple(
            ExternalPredictor(command, name=f"{backend.get('name', 'external')}_f{i}",
                              case_id=case_id)
            for i in range(n_folds)
        )
    else:
        raise ValidationError(f"unknown backend kind {backend.get('kind')!r}")
    tta_flips = tuple(cfg.get("tta_flips", ALL_FLIPS))
    if "reduced_flips" in cfg:
        reduced = tuple(cfg["reduced_flips"])
    else:
        reduced = tuple(f for f in ("identity", "z") if f in tta_flips)
    return EnsembleConfig(
        folds=folds,
        tta_flips=tta_flips,
        reduced_flips=reduced,
        tta_reduction_threshold=int(cfg.get("tta_reduction_threshold", 40_000_000)),
        time_budget_s=float(cfg.get("time_budget_s", 300.0)),
        decision_threshold=float(cfg.get("decision_threshold", 0.5)),
        soft_deadline=bool(cfg.get("soft_deadline", False)),
    )


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    file_cfg = _load_config_file(args.config)
    unknown = set(file_cfg) - _ENSEMBLE_KEYS - {"fdg", "psma", "window"}
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")

    base = {k: v for k, v in file_cfg.items() if k in _ENSEMBLE_KEYS}
    for key, flag in (
        ("folds", args.folds),
        ("tta_flips", args.tta),
        ("reduced_flips", args.reduced_tta),
        ("tta_reduction_threshold", args.tta_reduction_threshold),
        ("time_budget_s", args.time_budget),
        ("decision_threshold", args.threshold),
    ):
        if flag is not None:
            base[key] = flag
    if args.soft_deadline:
        base["soft_deadline"] = True

    cfg_fdg_dict = {**base, **file_cfg.get("fdg", {})}
    cfg_psma_dict = {**base, **file_cfg.get("psma", {})}
    cfg_fdg = _build_ensemble(cfg_fdg_dict, args.case_id)
    cfg_psma = _build_ensemble(cfg_psma_dict, args.case_id)
    window = WindowSpec(**file_cfg.get("window", {}))

    ct = nifti.read_volume(args.ct, kind=VolumeKind.CT_HU)
    pet = nifti.read_volume(args.pet, kind=VolumeKind.PET_SUV)
    disc = DiscriminatorModel.load(args.disc_model)

    result = route(ct, pet, disc, cfg_fdg, cfg_psma, window=window)

    nifti.write_volume(result.mask.to_label_volume(), args.out)
    if args.out_prob:
        nifti.write_volume(result.prob_map, args.out_prob)
    write_run_manifest(
        args.out, "run",
        {"ct": str(args.ct), "pet": str(args.pet), "disc_model": str(args.disc_model),
         "out": str(args.out), "out_prob": str(args.out_prob) if args.out_prob else None,
         "case_id": args.case_id,
         "fdg": cfg_fdg_dict, "psma": cfg_psma_dict,
         "window": dataclasses.asdict(window)},
        inputs=[args.ct, args.pet, args.disc_model],
        timings={**result.stage_timings,
                 "invocation_s": [round(i.wall_time_s, 6) for i in result.invocations]},
        extra={
            "tracer": result.tracer.name,
            "tracer_probability": round(result.tracer_probability, 9),
            "tta_used": list(result.tta_used),
            "invocations": [
                {"predictor": i.predictor, "fold": i.fold, "flip": i.flip}
                for i in result.invocations
            ],
            "mask_voxels": result.mask.voxel_count,
            "budget_exceeded": result.budget_exceeded,
        },
    )
    print(f"tracer={result.tracer.name} p={result.tracer_probability:.4f} "
          f"mask_voxels={result.mask.voxel_count} tta={','.join(result.tta_used)} "
          f"wall={result.wall_time_s:.2f}s budget_exceeded={result.budget_exceeded}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly

def build_parser() -> _Parser:
    parser = _Parser(prog="petseg", description=__doc__,
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=f"petseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--json", action="store_true", help="machine-readable errors on stderr")
        p.set_defaults(func=func)
        return p

    p = add("inspect", cmd_inspect, "print header fields and value stats of a volume")
    p.add_argument("volume", help="NIfTI file (.nii or .nii.gz)")

    p = add("resample", cmd_resample, "resample a volume to a target spacing")
    p.add_argument("--in", dest="infile", required=True, help="input volume")
    p.add_argument("--out", required=True, help="output volume")
    p.add_argument("--spacing", type=_spacing_triple, default=(3.3, 3.3, 3.3),
                   help="target spacing in mm (sx,sy,sz or a single value)")
    p.add_argument("--mode", choices=["trilinear", "nearest"], default="trilinear",
                   help="interpolation; nearest treats the input as labels")

    p = add("window", cmd_window, "write the 4-channel windowed stack")
    p.add_argument("--ct", required=True, help="CT volume (HU)")
    p.add_argument("--pet", required=True, help="PET volume (SUV)")
    p.add_argument("--out-dir", required=True, help="output directory for the 4 channels")
    p.add_argument("--pet-lo", type=float, default=PET_WINDOW[0], help="PET window low (SUV)")
    p.add_argument("--pet-hi", type=float, default=PET_WINDOW[1], help="PET window high (SUV)")
    p.add_argument("--ct-lo", type=float, default=CT_WINDOW[0], help="CT window low (HU)")
    p.add_argument("--ct-hi", type=float, default=CT_WINDOW[1], help="CT window high (HU)")

    p = add("mip", cmd_mip, "coronal maximum-intensity projection, padded to a square")
    p.add_argument("--pet", required=True, help="PET volume (SUV)")
    p.add_argument("--out", required=True, help="output 2D NIfTI")
    p.add_argument("--spacing", type=_spacing_triple, default=MIP_SPACING,
                   help="resampling spacing before projection (mm)")
    p.add_argument("--size", type=int, default=MIP_SIZE, help="output side length in pixels")
    p.add_argument("--cap", type=float, default=SUV_CAP, help="SUV cap for normalization")
    p.add_argument("--raw", action="store_true", help="skip the cap/normalize step")

    p = add("synth", cmd_synth, "generate a synthetic phantom corpus with MIP manifest")
    p.add_argument("--n", type=int, required=True, help="number of cases (balanced FDG/PSMA)")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--with-volumes", action="store_true",
                   help="also write pet/ct/lesion volumes per case")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")

    p = add("train-disc", cmd_train_disc, "train the tracer classifier on a MIP manifest")
    p.add_argument("--manifest", required=True, help="JSON list of {case_id, mip_path, label}")
    p.add_argument("--out-model", required=True, help="output model manifest (.json; blob sits next to it)")
    p.add_argument("--history", default=None, help="history CSV path (default: <model>_history.csv)")
    p.add_argument("--config", default=None, help="JSON config file (flags override it)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 0.0001)")
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None,
                   help="epoch cap (default 100)")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience (default 10)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                   help="minibatch size (default 16)")
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None,
                   help="validation share (default 0.2)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None,
                   help="decoupled weight decay (default 0.01)")
    p.add_argument("--seed", type=int, default=None, help="training seed (default 0)")

    p = add("cv-disc", cmd_cv_disc, "stratified k-fold cross-validation of the classifier")
    p.add_argument("--manifest", required=True, help="JSON list of {case_id, mip_path, label}")
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--out", default=None, help="optional per-fold accuracy CSV")
    p.add_argument("--config", default=None, help="JSON config file (flags override it)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 0.0001)")
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None,
                   help="epoch cap (default 100)")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience (default 10)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                   help="minibatch size (default 16)")
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None,
                   help="validation share carved from each training fold (default 0.2)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None,
                   help="decoupled weight decay (default 0.01)")
    p.add_argument("--seed", type=int, default=None, help="fold/shuffle seed (default 0)")

    p = add("predict-tracer", cmd_predict_tracer,
            "classify the tracer of a PET volume (exit 10 = FDG, 11 = PSMA)")
    p.add_argument("--model", required=True, help="trained model manifest (.json)")
    p.add_argument("--pet", required=True, help="PET volume (SUV)")
    p.add_argument("--spacing", type=_spacing_triple, default=MIP_SPACING,
                   help="resampling spacing before projection (mm)")
    p.add_argument("--cap", type=float, default=SUV_CAP, help="SUV cap for normalization")

    p = add("fuse", cmd_fuse, "merge organ masks + lesion into a grouped label map")
    p.add_argument("--manifest", required=True,
                   help="JSON {case_id, lesion_path, organs: {name: path}}")
    p.add_argument("--out", required=True, help="output label volume")
    p.add_argument("--ignore-unknown", action="store_true",
                   help="skip masks whose names are not in the group table")

    p = add("evaluate", cmd_evaluate, "Dice/FPV/FNV over matching files in two directories")
    p.add_argument("--pred-dir", required=True, help="predicted masks")
    p.add_argument("--gt-dir", required=True, help="ground-truth masks")
    p.add_argument("--out", required=True, help="output metrics CSV")
    p.add_argument("--connectivity", type=int, choices=[6, 18, 26], default=26,
                   help="component neighborhood")
    p.add_argument("--lesion-label", type=int, default=None,
                   help="foreground label (default: any nonzero voxel)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")

    p = add("run", cmd_run, "full routed inference: discriminate, ensemble, threshold")
    p.add_argument("--ct", required=True, help="CT volume (HU)")
    p.add_argument("--pet", required=True, help="PET volume (SUV)")
    p.add_argument("--disc-model", required=True, help="trained tracer classifier (.json)")
    p.add_argument("--out", required=True, help="output mask volume")
    p.add_argument("--out-prob", default=None, help="optional probability volume output")
    p.add_argument("--config", default=None,
                   help="JSON ensemble config with optional fdg/psma/window sections")
    p.add_argument("--case-id", default="case", help="case id passed to external backends")
    p.add_argument("--folds", type=int, default=None, help="fold predictors per ensemble (default 6)")
    p.add_argument("--tta", type=_flip_list, default=None,
                   help="comma list of flips (default all 8: identity,x,y,z,xy,xz,yz,xyz)")
    p.add_argument("--reduced-tta", type=_flip_list, default=None,
                   help="flip subset used above the voxel threshold (default identity,z)")
    p.add_argument("--tta-reduction-threshold", type=int, default=None,
                   help="voxel count above which reduced TTA applies (default 40000000)")
    p.add_argument("--time-budget", type=float, default=None,
                   help="soft per-case wall-clock budget in seconds (default 300)")
    p.add_argument("--threshold", type=float, default=None,
                   help="probability decision threshold (default 0.5)")
    p.add_argument("--soft-deadline", action="store_true",
                   help="preemptively drop to reduced TTA if the projected time exceeds the budget")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PredictorFailure as exc:
        if getattr(args, "json", False):
            _print_json_error(exc)
        else:
            print(f"petseg: predictor failure: {exc}", file=sys.stderr)
        return EXIT_PREDICTOR
    except ValidationError as exc:
        if getattr(args, "json", False):
            _print_json_error(exc)
        else:
            print(f"petseg: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (IoFailure, OSError) as exc:
        if getattr(args, "json", False):
            _print_json_error(exc)
        else:
            print(f"petseg: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PetsegError as exc:
        if getattr(args, "json", False):
            _print_json_error(exc)
        else:
            print(f"petseg: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
