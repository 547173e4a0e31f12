import pytest

from tumorsynth.phantom import PhantomSpec, generate_dataset
from tumorsynth.planner import Fingerprint, Plan, PlanningError, desk_axis, extract_fingerprint, make_plan
from tumorsynth.volume import CT_WINDOW, PET_WINDOW, Grid


def fp(shape, ct=(-100.0, 300.0), pet=(0.5, 8.0)):
    return Fingerprint(tuple(shape), (1.0, 1.0, 1.0), ct, pet, 3)


def reference_axis(dim):
    """Brute-force search: largest multiple of 2**depth not above min(dim, 64), depth reduced from 3."""
    cap = min(dim, 64)
    for depth in (3, 2, 1, 0):
        best = max((p for p in range(cap + 1) if p % 2**depth == 0), default=0)
        if best >= 8:
            return best, depth
    raise AssertionError


class TestMakePlan:
    def test_paper_profile(self):
        for shape in [(32, 32, 32), (200, 200, 300)]:
            p = make_plan(fp(shape), "paper")
            assert p.patch_size == (128, 160, 112)
            assert p.batch_size == 2 and p.epochs == 581

    def test_desk_examples(self):
        p = make_plan(fp((40, 48, 36)))
        assert p.patch_size == (40, 48, 32) and p.pool_depth == (3, 3, 3)
        assert make_plan(fp((48, 48, 48))).patch_size == (48, 48, 48)
        p = make_plan(fp((48, 48, 48)))
        assert p.batch_size == 2 and p.epochs == 20 and p.base_channels == 8

    def test_cap(self):
        assert make_plan(fp((100, 64, 70))).patch_size == (64, 64, 64)

    def test_small_axis(self):
        # depth 3 always fits once the cap is >= 8, so small axes round down
        assert desk_axis(12) == (8, 3)
        assert desk_axis(8) == (8, 3)

    def test_too_small(self):
        with pytest.raises(PlanningError):
            make_plan(fp((7, 32, 32)))

    def test_unknown_profile(self):
        with pytest.raises(PlanningError):
            make_plan(fp((32, 32, 32)), "gpu")

    def test_randomized_divisibility(self, rng):
        for _ in range(50):
            shape = tuple(int(s) for s in rng.integers(8, 160, size=3))
            plan = make_plan(fp(shape))
            for dim, depth, med in zip(plan.patch_size, plan.pool_depth, shape):
                assert dim % 2**depth == 0 and 8 <= dim <= min(med, 64)
                assert (dim, depth) == reference_axis(med)

    def test_monotone(self, rng):
        for _ in range(50):
            a = rng.integers(8, 100, size=3)
            b = a + rng.integers(0, 20, size=3)
            pa, pb = make_plan(fp(a)), make_plan(fp(b))
            assert all(x <= y for x, y in zip(pa.patch_size, pb.patch_size))

    def test_windows_clamped(self):
        p = make_plan(fp((32, 32, 32), ct=(-2000.0, 3000.0), pet=(0.2, 50.0)))
        assert p.ct_window == CT_WINDOW
        assert p.pet_window == (0.2, PET_WINDOW[1])

    def test_plan_invariants(self):
        with pytest.raises(PlanningError):
            Plan((12, 16, 16), (3, 3, 3), 2, 1, 8, {"ct": CT_WINDOW, "pet": PET_WINDOW})
        with pytest.raises(PlanningError):
            Plan((16, 16, 16), (1, 1, 1), 0, 1, 8, {"ct": CT_WINDOW, "pet": PET_WINDOW})

    def test_json_round_trip(self, tmp_path):
        p = make_plan(fp((40, 48, 36)))
        p.to_json(tmp_path / "plan.json")
        assert Plan.from_json(tmp_path / "plan.json") == p


class TestFingerprint:
    def test_invariants(self):
        with pytest.raises(PlanningError):
            Fingerprint((8, 8, 8), (1, 1, 1), (5.0, 1.0), (0, 1), 1)
        with pytest.raises(PlanningError):
            Fingerprint((8, 8, 8), (1, 1, 1), (0, 1), (0, 1), 0)

    def test_extract(self, small_dataset, tmp_path):
        f = extract_fingerprint(small_dataset)
        assert f.median_shape == (24, 24, 24) and f.case_count == 4
        assert f.ct_percentiles[0] < f.ct_percentiles[1]
        assert f == extract_fingerprint(small_dataset)
        f.to_json(tmp_path / "fp.json")
        assert Fingerprint.from_json(tmp_path / "fp.json") == f

    def test_median_depth(self, tmp_path):
        shapes = [(40, 32, 32), (48, 32, 32), (60, 32, 32)]
        import json
        from tumorsynth.dataset import read_manifest
        cases = []
        for i, s in enumerate(shapes):
            m = generate_dataset(1, 1, PhantomSpec(grid=Grid(s), lesion_radius_range_mm=(2.0, 3.0), seed=i), tmp_path / f"d{i}")
            cases.append(m)
        merged = {"format_version": 1, "cases": []}
        for i, m in enumerate(cases):
            for rec in m.to_dict()["cases"]:
                if rec["split"] != "train":
                    continue
                rec = dict(rec)
                for k in ("volume_path", "lesion_mask_path", "organ_map_path"):
                    if rec.get(k):
                        rec[k] = f"d{i}/{rec[k]}"
                rec["case_id"] = f"{i}_{rec['case_id']}"
                merged["cases"].append(rec)
        (tmp_path / "manifest.json").write_text(json.dumps(merged))
        f = extract_fingerprint(read_manifest(tmp_path / "manifest.json"))
        assert f.median_shape == (48, 32, 32)

    def test_empty_manifest(self, tmp_path):
        from tumorsynth.dataset import DatasetManifest
        with pytest.raises(PlanningError):
            extract_fingerprint(DatasetManifest(tmp_path, []))
