"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Runtime-bounded criteria measure wall time with perf_counter and
assert the stated budget.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from petseg import cli, nifti
from petseg.discriminator import DiscriminatorModel, TrainConfig, cross_validate, predict_tracer
from petseg.fusion import split_label_map, merge_organ_masks
from petseg.metrics import compute_case_metrics, connected_components
from petseg.nn import (
    Conv2DSpec,
    FlattenSpec,
    LinearSpec,
    Network,
    ReLUSpec,
    SigmoidSpec,
    analytic_gradients,
    grad_check,
    gradient_relative_errors,
    numeric_gradients,
)
from petseg.orchestrator import (
    ALL_FLIPS,
    EnsembleConfig,
    SuvThresholdPredictor,
    ensemble_predict,
    tta_predict,
)
from petseg.preprocess import build_channels, resample_nearest, resample_trilinear
from petseg.synthdata import Hotspot, PhantomSpec, TracerStyle, make_mip_dataset, make_phantom
from petseg.volume import BinaryMask, Volume3D, VolumeKind

from oracles import bfs_components, naive_case_metrics

REPO_ROOT = Path(__file__).resolve().parents[1]

# a 2-conv + 2-linear miniature of the discriminator architecture
MINI_SPECS = (
    Conv2DSpec(1, 2, 3, 2, 1), ReLUSpec(),
    Conv2DSpec(2, 4, 3, 2, 1), ReLUSpec(),
    FlattenSpec(),
    LinearSpec(4 * 3 * 3, 8), ReLUSpec(),
    LinearSpec(8, 1),
    SigmoidSpec(),
)
MINI_INPUT = (1, 12, 12)


def report(criterion: str, detail: str):
    print(f"ACCEPTANCE {criterion}: PASS ({detail})")


def test_criterion_01_gradient_fidelity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = Network(MINI_SPECS, rng, input_shape=MINI_INPUT)
        x = rng.standard_normal((2, *MINI_INPUT))
        y = rng.integers(0, 2, size=(2, 1)).astype(float)
        err = grad_check(net, x, y)
        worst = max(worst, err)
        assert err < 1e-5, f"seed {seed}: max rel err {err}"

    # negative control: doubling one analytic gradient must be detected
    rng = np.random.default_rng(0)
    net = Network(MINI_SPECS, rng, input_shape=MINI_INPUT)
    x = rng.standard_normal((2, *MINI_INPUT))
    y = rng.integers(0, 2, size=(2, 1)).astype(float)
    analytic = analytic_gradients(net, x, y)
    numeric = numeric_gradients(net, x, y)
    name = max(analytic, key=lambda k: np.abs(analytic[k]).max())
    flat = analytic[name].reshape(-1)
    flat[np.argmax(np.abs(flat))] *= 2.0
    control = max(float(e.max()) for e in gradient_relative_errors(analytic, numeric).values())
    assert control > 0.3, f"corruption not detected: {control}"

    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"gradient sweep took {elapsed:.1f}s"
    report("1 gradient fidelity", f"20 seeds, worst rel err {worst:.2e}, "
           f"control {control:.2f}, {elapsed:.1f}s")


def test_criterion_02_discriminator_cv_proxy():
    # The reference accuracy on real challenge data (99.64%) is not
    # reproducible without that data; this synthetic stand-in must reach a
    # 0.99 mean. Epochs are capped at 30 to respect the wall-clock budget
    # on a single slow core: the task converges within the first few
    # epochs, and lr/patience/batch size stay at their defaults.
    t0 = time.perf_counter()
    data = make_mip_dataset(200, seed=42)
    result = cross_validate(data, k=5, cfg=TrainConfig(max_epochs=30, seed=42))
    elapsed = time.perf_counter() - t0
    assert result.mean_accuracy >= 0.99, f"mean accuracy {result.mean_accuracy}"
    assert elapsed < 600.0, f"CV run took {elapsed:.0f}s"
    held = sorted(cid for fold in result.fold_case_ids for cid in fold)
    assert held == sorted(m.case_id for m in data)
    report("2 discriminator CV proxy",
           f"mean accuracy {result.mean_accuracy:.4f} over folds "
           f"{[round(a, 4) for a in result.fold_accuracies]}, {elapsed:.0f}s")


def test_criterion_03_inference_latency():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None

    from petseg.preprocess import discriminator_mip

    data = np.full((400, 400, 600), 0.8)
    data[180:220, 180:220, 500:560] += 9.0
    pet = Volume3D(data, (1.5, 1.5, 1.5))
    model = DiscriminatorModel.fresh(seed=0)

    def one_case():
        t0 = time.perf_counter()
        mip = discriminator_mip(pet)
        predict_tracer(model, mip)
        return time.perf_counter() - t0

    def run_measurement():
        one_case()  # warm-up: fault in buffers once; the bound is the
        # steady-state per-patient average, as an average over a dataset is
        times = [one_case() for _ in range(3)]
        return float(np.mean(times)), times

    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            mean_t, times = run_measurement()
    else:
        mean_t, times = run_measurement()

    assert mean_t < 2.18, f"resample+MIP+pad+forward averaged {mean_t:.2f}s: {times}"
    report("3 inference latency", f"400x400x600 voxels, mean {mean_t:.2f}s over 3 runs")


def test_criterion_04_metrics_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    spacing = (1.7, 2.1, 1.3)
    n_pairs = 1000
    for i in range(n_pairs):
        pred = rng.random((16, 16, 16)) < rng.uniform(0.0, 0.3)
        gt = rng.random((16, 16, 16)) < rng.uniform(0.0, 0.3)
        got = compute_case_metrics(BinaryMask(pred, spacing), BinaryMask(gt, spacing), "t")
        ref = naive_case_metrics(pred, gt, spacing, 26)
        assert got.fpv_voxels == ref["fpv_voxels"], f"pair {i}"
        assert got.fnv_voxels == ref["fnv_voxels"], f"pair {i}"
        assert got.n_pred_components == ref["n_pred"], f"pair {i}"
        assert got.n_gt_components == ref["n_gt"], f"pair {i}"
        assert abs(got.fpv_ml - ref["fpv_ml"]) < 1e-12
        assert abs(got.fnv_ml - ref["fnv_ml"]) < 1e-12
        if ref["dice"] is None:
            assert got.dice is None
        else:
            assert abs(got.dice - ref["dice"]) <= 1e-12, f"pair {i}"
        if i % 100 == 0:
            labels, _ = connected_components(BinaryMask(pred, spacing), 26)
            ref_labels, _ = bfs_components(pred, 26)
            assert np.array_equal(labels.data, ref_labels), f"partition differs at pair {i}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"metrics sweep took {elapsed:.1f}s"
    report("4 metrics oracle equivalence", f"{n_pairs} pairs, {elapsed:.1f}s")


def test_criterion_05_resampler_exactness():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(50):
        shape = tuple(int(s) for s in rng.integers(5, 10, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.8, 2.5, size=3))
        target = tuple(float(s) for s in rng.uniform(0.8, 2.5, size=3))
        a, b, c, d = rng.uniform(-3, 3, size=4)
        idx = np.indices(shape, dtype=np.float64)
        field = a + b * idx[0] * spacing[0] + c * idx[1] * spacing[1] + d * idx[2] * spacing[2]
        vol = Volume3D(field, spacing)
        out = resample_trilinear(vol, target)

        coords = [
            (np.arange(n_out) + 0.5) * t - 0.5 * s
            for n_out, t, s in zip(out.shape, target, spacing)
        ]
        interior = [
            (co >= 0.0) & (co <= (n - 1) * s)
            for co, n, s in zip(coords, shape, spacing)
        ]
        expected = (
            a
            + b * coords[0][:, None, None]
            + c * coords[1][None, :, None]
            + d * coords[2][None, None, :]
        )
        mask = interior[0][:, None, None] & interior[1][None, :, None] & interior[2][None, None, :]
        if mask.any():
            err = float(np.max(np.abs(out.data - expected)[mask]))
            worst = max(worst, err)
            assert err < 1e-9, f"trial {trial}: affine error {err}"

    vol = Volume3D(rng.random((7, 6, 5)), (1.3, 2.2, 0.7))
    out = resample_trilinear(vol, vol.spacing)
    assert np.array_equal(out.data, vol.data)
    labels = Volume3D(rng.integers(0, 4, size=(6, 6, 6)).astype(np.int32),
                      (1.1, 1.1, 2.0), VolumeKind.LABEL)
    out_l = resample_nearest(labels, labels.spacing)
    assert np.array_equal(out_l.data, labels.data)
    report("5 resampler exactness", f"50 affine fields, worst interior err {worst:.2e}; "
           "identity resample bitwise for both interpolators")


def test_criterion_06_tta_ensemble_algebra(rng):
    ct = Volume3D(rng.uniform(-500, 900, size=(6, 5, 4)), (2, 2, 2), VolumeKind.CT_HU)
    pet = Volume3D(rng.uniform(0, 30, size=(6, 5, 4)), (2, 2, 2))
    stack = build_channels(ct, pet)

    single = SuvThresholdPredictor().predict(stack)
    tta = tta_predict(SuvThresholdPredictor(), stack, ALL_FLIPS)
    max_diff = float(np.max(np.abs(tta.data - single.data)))
    assert max_diff < 1e-9

    class Constant(SuvThresholdPredictor):
        def __init__(self, v):
            super().__init__(name=f"const_{v}")
            self.v = v

        def predict(self, stack):
            return Volume3D(np.full(stack.shape, self.v), stack.spacing,
                            VolumeKind.PROBABILITY)

    cfg = EnsembleConfig(folds=(Constant(0.2), Constant(0.6)), tta_flips=("identity",),
                         reduced_flips=("identity",))
    mean = ensemble_predict(cfg, stack)
    assert np.all(mean.data == 0.4)

    voxels = stack.voxel_count  # 120
    base = dict(folds=(SuvThresholdPredictor(),), tta_flips=ALL_FLIPS,
                reduced_flips=("identity", "z"))
    calls_at, calls_above = [], []
    ensemble_predict(EnsembleConfig(**base, tta_reduction_threshold=voxels), stack,
                     on_invoke=calls_at.append)
    ensemble_predict(EnsembleConfig(**base, tta_reduction_threshold=voxels - 1), stack,
                     on_invoke=calls_above.append)
    assert {c.flip for c in calls_at} == set(ALL_FLIPS)          # at threshold: full
    assert {c.flip for c in calls_above} == {"identity", "z"}    # threshold+1: reduced
    report("6 TTA/ensemble algebra",
           f"8-flip TTA vs single pass diff {max_diff:.2e}; constant-fold mean exact; "
           "reduced branch flips exactly above the voxel threshold")


def test_criterion_07_fusion_supremacy():
    rng = np.random.default_rng(99)
    names = ["liver", "brain", "kidney_left", "skeleton", "lung_right", "spleen"]
    for trial in range(100):
        shape = tuple(int(s) for s in rng.integers(4, 9, size=3))
        masks = [
            (name, BinaryMask(rng.random(shape) < rng.uniform(0.1, 0.4), (1, 1, 1)))
            for name in rng.choice(names, size=3, replace=False)
        ]
        lesion = BinaryMask(rng.random(shape) < rng.uniform(0.05, 0.3), (1, 1, 1))
        fused = merge_organ_masks(masks, lesion)
        assert np.all(fused.data[lesion.mask] == 13), f"trial {trial}"
        assert np.array_equal(split_label_map(fused, 13).mask, lesion.mask)

        # split∘merge round-trip: re-merging the split outputs reproduces the map
        parts = []
        for gid in range(1, 13):
            part = split_label_map(fused, gid)
            if part.mask.any():
                from petseg.fusion import DEFAULT_GROUPS

                parts.append((DEFAULT_GROUPS.group_by_id(gid).name, part))
        refused = merge_organ_masks(parts, split_label_map(fused, 13))
        assert np.array_equal(refused.data, fused.data), f"trial {trial}"
    report("7 fusion supremacy", "100 random fixtures: lesion voxels all labeled 13, "
           "split-merge round-trips")


def test_criterion_08_nifti_round_trip(tmp_path):
    rng = np.random.default_rng(31)
    dtypes = ["uint8", "int16", "float32", "float64"]
    for trial in range(500):
        dtype = dtypes[trial % 4]
        order = "<" if (trial // 4) % 2 == 0 else ">"
        gz = (trial // 8) % 2 == 0
        shape = tuple(int(s) for s in rng.integers(1, 7, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.4, 5.0, size=3))
        if dtype == "uint8":
            vol = Volume3D(rng.integers(0, 256, size=shape).astype(np.int32), spacing,
                           VolumeKind.LABEL)
        elif dtype == "int16":
            vol = Volume3D(rng.integers(0, 32768, size=shape).astype(np.int32), spacing,
                           VolumeKind.LABEL)
        elif dtype == "float32":
            vol = Volume3D(rng.random(shape).astype(np.float32).astype(np.float64), spacing)
        else:
            vol = Volume3D(rng.random(shape), spacing)
        path = tmp_path / f"rt{trial}.nii{'.gz' if gz else ''}"
        nifti.write_volume(vol, path, byteorder=order, dtype=dtype)
        back = nifti.read_volume(path)
        assert back.shape == vol.shape, f"trial {trial}"
        assert np.array_equal(back.data, vol.data), f"trial {trial} ({dtype} {order} gz={gz})"
        assert np.allclose(back.spacing, vol.spacing, rtol=1e-6), f"trial {trial}"
        path.unlink()
    report("8 NIfTI round trip", "500 volumes x {uint8,int16,float32,float64} x "
           "both endiannesses x gzip/plain, bit-exact")


def test_criterion_09_end_to_end_determinism(tmp_path):
    extent = [(n - 1) * s for n, s in zip((96, 64, 160), (4.0, 4.0, 4.0))]
    spec = PhantomSpec(
        tracer_style=TracerStyle.FDG_LIKE, seed=55, noise_sigma=0.03,
        hotspots=(Hotspot((extent[0] / 2, extent[1] / 2, extent[2] / 2), 28.0, 15.0, True),),
    )
    pet, ct, _ = make_phantom(spec)
    nifti.write_volume(pet, tmp_path / "pet.nii.gz")
    nifti.write_volume(ct, tmp_path / "ct.nii.gz")
    model = DiscriminatorModel.fresh(seed=1)
    model.save(tmp_path / "disc.json")

    def run(out_dir: Path):
        out_dir.mkdir()
        rc = cli.main([
            "run",
            "--ct", str(tmp_path / "ct.nii.gz"),
            "--pet", str(tmp_path / "pet.nii.gz"),
            "--disc-model", str(tmp_path / "disc.json"),
            "--out", str(out_dir / "mask.nii.gz"),
            "--out-prob", str(out_dir / "prob.nii.gz"),
            "--folds", "2", "--tta", "identity,x,z", "--reduced-tta", "identity,z",
        ])
        assert rc == 0

    run(tmp_path / "r1")
    run(tmp_path / "r2")
    for name in ("mask.nii.gz", "prob.nii.gz"):
        b1 = (tmp_path / "r1" / name).read_bytes()
        b2 = (tmp_path / "r2" / name).read_bytes()
        assert b1 == b2, f"{name} differs between runs"
    docs = []
    for d in ("r1", "r2"):
        doc = json.loads((tmp_path / d / "mask.nii.gz.manifest.json").read_text())
        doc.pop("timings")
        doc.pop("host")
        doc["config"]["out"] = doc["config"]["out_prob"] = None
        docs.append(json.dumps(doc, sort_keys=True))
    assert docs[0] == docs[1], "manifests differ beyond timing fields"
    report("9 end-to-end determinism", "two `run` invocations byte-identical "
           "(masks, probability maps, manifests minus timings)")


def test_criterion_10_reference_results_documented_out_of_scope():
    readme = (REPO_ROOT / "README.md").read_text()
    for token in ("74.91", "40.72", "0.760"):
        assert token in readme, f"README must state the unreproducible reference value {token}"
    assert "not reproducible" in readme.lower() or "cannot be reproduced" in readme.lower()
    report("10 reference results out of scope", "README documents why the published "
           "preliminary-test-set numbers cannot be reproduced here")
