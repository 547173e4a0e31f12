import hashlib
import os

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorsynth.volume import (
    CT_WINDOW,
    Grid,
    InvariantViolation,
    LabelMap,
    MalformedHeaderError,
    ShapeMismatchError,
    Volume,
    VolumeFileNotFound,
    companion_paths,
    denormalize_ct,
    denormalize_pet,
    downsample_mask,
    extract_patch,
    load_labelmap,
    load_volume,
    normalize_ct,
    normalize_pet,
    save_labelmap,
    save_volume,
)


def make_volume(rng, shape=(8, 8, 8), spacing=(1.0, 1.5, 2.0)):
    grid = Grid(shape, spacing)
    return Volume(grid, rng.normal(0, 300, shape), rng.uniform(0, 12, shape))


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestGrid:
    def test_rejects_small_dims(self):
        with pytest.raises(InvariantViolation):
            Grid((3, 8, 8))

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(InvariantViolation):
            Grid((8, 8, 8), (1.0, 0.0, 1.0))

    def test_extent(self):
        assert Grid((10, 20, 30), (1.0, 0.5, 2.0)).extent_mm == (10.0, 10.0, 60.0)


class TestVolume:
    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            Volume(Grid((8, 8, 8)), np.zeros((8, 8, 8)), np.zeros((8, 8, 4)))

    def test_negative_pet_names_channel(self):
        pet = np.zeros((8, 8, 8))
        pet[1, 2, 3] = -0.1
        with pytest.raises(InvariantViolation, match="pet"):
            Volume(Grid((8, 8, 8)), np.zeros((8, 8, 8)), pet)

    def test_non_finite(self):
        ct = np.zeros((8, 8, 8))
        ct[0, 0, 0] = np.nan
        with pytest.raises(InvariantViolation, match="ct"):
            Volume(Grid((8, 8, 8)), ct, np.zeros((8, 8, 8)))

    def test_normalized_round_trip(self, rng):
        v = make_volume(rng)
        v = Volume(v.grid, np.clip(v.ct, -1024, 1024), np.clip(v.pet, 0, 20))
        back = Volume.from_normalized(v.normalized(), v.grid)
        np.testing.assert_allclose(back.ct, v.ct, atol=1e-3)
        np.testing.assert_allclose(back.pet, v.pet, atol=1e-5)


class TestLabelMap:
    def test_range(self):
        with pytest.raises(InvariantViolation):
            LabelMap(Grid((4, 4, 4)), np.full((4, 4, 4), 256))
        with pytest.raises(InvariantViolation):
            LabelMap(Grid((4, 4, 4)), np.full((4, 4, 4), -1))

    def test_binary(self):
        m = LabelMap(Grid((4, 4, 4)), np.eye(4, dtype=int)[None].repeat(4, 0))
        assert m.is_binary and m.label_set() == {0, 1}


class TestNormalization:
    def test_ct_examples(self):
        np.testing.assert_allclose(normalize_ct([0.0, -1024.0, 2000.0, 512.0]), [0.0, -1.0, 1.0, 0.5])

    def test_pet_examples(self):
        np.testing.assert_allclose(normalize_pet([0.0, 10.0, 40.0]), [-1.0, 0.0, 1.0])

    def test_pet_all_zero(self):
        assert np.all(normalize_pet(np.zeros((3, 3))) == -1.0)

    def test_pet_negative_rejected(self):
        with pytest.raises(ValueError):
            normalize_pet([-1.0])

    def test_ct_non_finite_rejected(self):
        with pytest.raises(ValueError):
            normalize_ct([np.inf])

    @given(st.lists(st.floats(0, 20), min_size=1, max_size=50))
    def test_pet_inverse(self, xs):
        x = np.array(xs)
        np.testing.assert_allclose(denormalize_pet(normalize_pet(x)), x, atol=1e-9)

    @given(st.lists(st.floats(-1024, 1024), min_size=1, max_size=50))
    def test_ct_inverse(self, xs):
        x = np.array(xs)
        np.testing.assert_allclose(denormalize_ct(normalize_ct(x)), x, atol=1e-9)

    @given(st.lists(st.floats(-5000, 5000), min_size=2, max_size=50))
    def test_ct_monotone(self, xs):
        x = np.sort(np.array(xs))
        assert np.all(np.diff(normalize_ct(x)) >= 0)

    def test_idempotent_after_clipping(self, rng):
        x = rng.normal(0, 2000, 100)
        once = normalize_ct(x)
        again = normalize_ct(denormalize_ct(once))
        np.testing.assert_allclose(again, once, atol=1e-12)


class TestPatches:
    def test_identity_crop(self, rng):
        v = make_volume(rng)
        m = LabelMap(v.grid, rng.integers(0, 2, v.shape))
        pv, pm = extract_patch(v, m, (4, 4, 4), v.shape)
        assert pv.equals(v) and np.array_equal(pm.labels, m.labels)

    def test_corner_padding(self, rng):
        v = make_volume(rng)
        m = LabelMap(v.grid, np.ones(v.shape, dtype=np.uint8))
        pv, pm = extract_patch(v, m, (0, 0, 0), (4, 4, 4))
        assert pv.shape == (4, 4, 4)
        # start = center - size // 2 = -2: the first two slices along each axis are out of bounds
        assert np.all(pv.ct[:2] == CT_WINDOW[0]) and np.all(pv.pet[:2] == 0.0)
        assert np.all(pm.labels[:2] == 0) and np.all(pm.labels[2:, 2:, 2:] == 1)
        np.testing.assert_array_equal(pv.ct[2:, 2:, 2:], v.ct[:2, :2, :2])

    @given(
        st.tuples(st.integers(-10, 20), st.integers(-10, 20), st.integers(-10, 20)),
        st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(4, 12)),
    )
    @settings(max_examples=50, deadline=None)
    def test_shape_always_requested(self, center, size):
        grid = Grid((8, 8, 8))
        v = Volume(grid, np.zeros(grid.shape), np.zeros(grid.shape))
        m = LabelMap(grid, np.zeros(grid.shape, dtype=np.uint8))
        size = tuple(max(s, 4) for s in size)
        pv, pm = extract_patch(v, m, center, size)
        assert pv.shape == size and pm.shape == size

    def test_nonpositive_size(self, rng):
        v = make_volume(rng)
        with pytest.raises(ValueError):
            extract_patch(v, LabelMap(v.grid, np.zeros(v.shape, int)), (0, 0, 0), (0, 4, 4))

    def test_lesion_centred_crop_contains_lesion(self):
        from tumorsynth.phantom import PhantomSpec, generate_phantom

        for seed in range(10):
            case = generate_phantom(PhantomSpec(grid=Grid((32, 32, 32)), lesion_radius_range_mm=(2.0, 3.0), seed=seed))
            idx = np.argwhere(case.lesion_mask.labels > 0)
            for center in idx[:: max(1, len(idx) // 5)]:
                _, pm = extract_patch(case.volume, case.lesion_mask, center, (8, 8, 8))
                assert pm.labels.sum() >= 1


class TestDownsample:
    def test_identity(self, rng):
        m = LabelMap(Grid((8, 8, 8)), rng.integers(0, 4, (8, 8, 8)))
        assert np.array_equal(downsample_mask(m, (1, 1, 1)).labels, m.labels)

    def test_all_ones(self):
        out = downsample_mask(LabelMap(Grid((8, 8, 8)), np.ones((8, 8, 8), int)), (2, 2, 2))
        assert out.shape == (4, 4, 4) and np.all(out.labels == 1)
        assert out.grid.spacing == (2.0, 2.0, 2.0)

    def test_origin_sample_oracle(self, rng):
        for _ in range(20):
            labels = rng.integers(0, 5, (8, 8, 8))
            out = downsample_mask(LabelMap(Grid((8, 8, 8)), labels), (2, 2, 2)).labels
            oracle = np.empty((4, 4, 4), dtype=int)
            for i in range(4):
                for j in range(4):
                    for k in range(4):
                        oracle[i, j, k] = labels[2 * i, 2 * j, 2 * k]
            assert np.array_equal(out, oracle)
            assert set(np.unique(out)) <= set(np.unique(labels))

    def test_any_mode_keeps_single_voxel(self):
        labels = np.zeros((8, 8, 8), int)
        labels[3, 5, 7] = 1
        out = downsample_mask(LabelMap(Grid((8, 8, 8)), labels), (2, 2, 2), mode="any").labels
        assert out.sum() == 1 and out[1, 2, 3] == 1

    def test_non_divisible(self):
        with pytest.raises(ShapeMismatchError):
            downsample_mask(LabelMap(Grid((9, 8, 8)), np.zeros((9, 8, 8), int)), (2, 2, 2))


class TestIO:
    def test_round_trip(self, tmp_path, rng):
        v = make_volume(rng)
        save_volume(v, tmp_path / "case.nii.gz")
        back = load_volume(tmp_path / "case.nii.gz")
        assert back.grid == v.grid
        np.testing.assert_array_equal(back.ct, v.ct.astype(np.float32))
        np.testing.assert_array_equal(back.pet, v.pet.astype(np.float32))

    def test_companion_names(self, tmp_path):
        ct, pet = companion_paths(tmp_path / "case_0001.nii.gz")
        assert ct.name == "case_0001_ct.nii.gz" and pet.name == "case_0001_pet.nii.gz"
        assert companion_paths(ct) == (ct, pet)

    def test_two_channel_file(self, tmp_path, rng):
        v = make_volume(rng)
        img = nib.Nifti1Image(np.stack([v.ct, v.pet], axis=-1), v.grid.affine())
        img.header.set_zooms(v.grid.spacing + (1.0,))
        nib.save(img, str(tmp_path / "both.nii.gz"))
        back = load_volume(tmp_path / "both.nii.gz")
        assert back.equals(v)

    def test_deterministic_bytes(self, tmp_path, rng):
        v = make_volume(rng)
        a = save_volume(v, tmp_path / "a.nii.gz")
        b = save_volume(v, tmp_path / "b.nii.gz")
        assert [sha(p) for p in a] == [sha(p) for p in b]

    def test_shape_mismatch_pair(self, tmp_path):
        grid = Grid((32, 32, 32))
        nib.save(nib.Nifti1Image(np.zeros((32, 32, 32), np.float32), grid.affine()), str(tmp_path / "x_ct.nii.gz"))
        nib.save(nib.Nifti1Image(np.zeros((32, 32, 16), np.float32), grid.affine()), str(tmp_path / "x_pet.nii.gz"))
        with pytest.raises(ShapeMismatchError):
            load_volume(tmp_path / "x.nii.gz")

    def test_negative_pet_file(self, tmp_path):
        grid = Grid((8, 8, 8))
        pet = np.zeros((8, 8, 8), np.float32)
        pet[0, 0, 0] = -1
        nib.save(nib.Nifti1Image(np.zeros((8, 8, 8), np.float32), grid.affine()), str(tmp_path / "y_ct.nii.gz"))
        nib.save(nib.Nifti1Image(pet, grid.affine()), str(tmp_path / "y_pet.nii.gz"))
        with pytest.raises(InvariantViolation, match="pet"):
            load_volume(tmp_path / "y.nii.gz")

    def test_missing(self, tmp_path):
        with pytest.raises(VolumeFileNotFound):
            load_volume(tmp_path / "nothing.nii.gz")

    def test_malformed(self, tmp_path):
        (tmp_path / "bad_ct.nii").write_bytes(b"not a nifti header at all" * 20)
        (tmp_path / "bad_pet.nii").write_bytes(b"not a nifti header at all" * 20)
        with pytest.raises(MalformedHeaderError):
            load_volume(tmp_path / "bad.nii")

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_read_only_location(self, tmp_path, rng):
        ro = tmp_path / "ro"
        ro.mkdir()
        ro.chmod(0o500)
        with pytest.raises(OSError):
            save_volume(make_volume(rng), ro / "v.nii.gz")

    def test_missing_parent(self, tmp_path, rng):
        with pytest.raises(OSError):
            save_volume(make_volume(rng), tmp_path / "no" / "such" / "v.nii.gz")

    def test_labelmap_round_trip(self, tmp_path, rng):
        m = LabelMap(Grid((8, 8, 8), (2.0, 1.0, 1.0)), rng.integers(0, 6, (8, 8, 8)))
        save_labelmap(m, tmp_path / "m.nii.gz")
        back = load_labelmap(tmp_path / "m.nii.gz")
        assert back.grid == m.grid and np.array_equal(back.labels, m.labels)
