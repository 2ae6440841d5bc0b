import numpy as np
import pytest

from petseg import nifti
from petseg.errors import HotspotOutOfBounds, ValidationError
from petseg.preprocess import discriminator_mip
from petseg.synthdata import (
    Hotspot,
    PhantomSpec,
    TracerStyle,
    make_mip_dataset,
    make_phantom,
    random_phantom_spec,
)


class TestMakePhantom:
    def test_no_hotspots_no_noise_constant_body(self):
        spec = PhantomSpec(tracer_style=TracerStyle.PSMA_LIKE, noise_sigma=0.0,
                           background_suv=1.0)
        pet, ct, lesion = make_phantom(spec)
        assert not lesion.mask.any()
        # away from the style bladder spot the body is the flat background
        assert pet.data[5, 32, 150] == pytest.approx(0.0, abs=1e-4)   # outside body
        assert ct.data[5, 32, 150] == -1000.0
        center = pet.data[48, 32, 130]
        assert center == pytest.approx(1.0, abs=0.05)
        assert ct.data[48, 32, 80] == 40.0

    def test_pet_nonnegative_with_noise(self):
        spec = PhantomSpec(noise_sigma=0.5, seed=3)
        pet, _, _ = make_phantom(spec)
        assert pet.data.min() >= 0.0

    def test_deterministic_under_seed(self):
        spec = PhantomSpec(seed=11, noise_sigma=0.1)
        a = make_phantom(spec)
        b = make_phantom(spec)
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)
        assert np.array_equal(a[2].mask, b[2].mask)

    def test_lesion_gt_is_half_peak_ball(self):
        extent = [(n - 1) * s for n, s in zip((96, 64, 160), (4.0, 4.0, 4.0))]
        center = (extent[0] / 2, extent[1] / 2, extent[2] / 2)
        spec = PhantomSpec(
            tracer_style=TracerStyle.PSMA_LIKE,
            hotspots=(Hotspot(center, 20.0, 6.0, is_lesion=True),),
            noise_sigma=0.0,
        )
        _, _, lesion = make_phantom(spec)
        assert lesion.mask.any()
        xs = np.arange(96) * 4.0
        ys = np.arange(64) * 4.0
        zs = np.arange(160) * 4.0
        d2 = ((xs - center[0]) ** 2)[:, None, None] + ((ys - center[1]) ** 2)[None, :, None] \
            + ((zs - center[2]) ** 2)[None, None, :]
        inside = d2 <= 20.0**2
        assert np.array_equal(lesion.mask, inside)

    def test_hotspot_out_of_bounds(self):
        spec = PhantomSpec(hotspots=(Hotspot((0.0, 0.0, 0.0), 50.0, 5.0, True),))
        with pytest.raises(HotspotOutOfBounds):
            make_phantom(spec)

    def test_fdg_mip_max_in_superior_band(self):
        # the discriminative cue: FDG phantoms have their global MIP max in
        # the top 20% of the z range, PSMA phantoms do not
        for seed in range(5):
            spec = random_phantom_spec(TracerStyle.FDG_LIKE, seed)
            pet, _, _ = make_phantom(spec)
            mip = discriminator_mip(pet)
            _, z_max = np.unravel_index(np.argmax(mip.pixels), mip.pixels.shape)
            rows = np.nonzero(mip.pixels.any(axis=0))[0]
            z_lo, z_hi = rows.min(), rows.max()
            assert z_max >= z_hi - 0.2 * (z_hi - z_lo), f"seed {seed}: max at {z_max}"

    def test_round_trip_through_nifti(self, tmp_path):
        pet, ct, lesion = make_phantom(PhantomSpec(seed=5))
        for name, vol in (("pet", pet), ("ct", ct), ("lesion", lesion.to_label_volume())):
            path = tmp_path / f"{name}.nii.gz"
            nifti.write_volume(vol, path, dtype="float64" if name != "lesion" else None)
            back = nifti.read_volume(path)
            assert back.shape == vol.shape
            assert np.array_equal(back.data, vol.data)


class TestMakeMipDataset:
    def test_balance_and_shape(self):
        mips = make_mip_dataset(6, seed=1)
        labels = [m.label for m in mips]
        assert labels.count(0) == 3 and labels.count(1) == 3
        for m in mips:
            assert m.image.shape == (224, 224)
            assert m.image.pixels.min() >= 0.0
            assert m.image.pixels.max() <= 1.0

    def test_deterministic(self):
        a = make_mip_dataset(4, seed=9)
        b = make_mip_dataset(4, seed=9)
        for ma, mb in zip(a, b):
            assert ma.case_id == mb.case_id
            assert ma.label == mb.label
            assert np.array_equal(ma.image.pixels, mb.image.pixels)

    def test_minimum_size(self):
        with pytest.raises(ValidationError):
            make_mip_dataset(1)

    def test_linear_probe_separates_classes(self):
        # a hand-rolled threshold on mean superior-band intensity must reach
        # 95%+: guarantees the learning task is actually feasible
        mips = make_mip_dataset(60, seed=42)
        feats = np.array([m.image.pixels[:, 150:].mean() for m in mips])
        labels = np.array([m.label for m in mips])
        mu_fdg = feats[labels == 0].mean()
        mu_psma = feats[labels == 1].mean()
        threshold = (mu_fdg + mu_psma) / 2.0
        pred = (feats < threshold).astype(int) if mu_fdg > mu_psma else (feats > threshold).astype(int)
        accuracy = float((pred == labels).mean())
        assert accuracy >= 0.95, f"probe accuracy {accuracy}"
