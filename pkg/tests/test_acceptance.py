"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that conftest prints in the terminal
summary. The last three share a single three-seed desk pipeline run.
"""

import math
import shutil
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
import torch

from tumorsynth.autoencoder import AEConfig, build_autoencoder, decode, encode, reconstruction_mse, train_autoencoder
from tumorsynth.dataset import read_manifest
from tumorsynth.diffusion import (
    Conditioning,
    DiffusionConfig,
    build_denoiser,
    build_schedule,
    forward_diffuse,
    sample,
    training_loss,
)
from tumorsynth.experiment import ExperimentConfig, run_pipeline, run_seed
from tumorsynth.metrics import dice, nsd
from tumorsynth.phantom import generate_dataset
from tumorsynth.planner import Fingerprint, extract_fingerprint, make_plan
from tumorsynth.seeding import derive_seed
from tumorsynth.segmentation import expand_with_transforms
from tumorsynth.synthesis import (
    Rejection,
    SynthesisModels,
    build_augmented_dataset,
    compute_augmented_size,
    locality,
    synthesize_volume,
)
from tumorsynth.volume import Grid, LabelMap, Volume, save_volume

from conftest import record_criterion
from oracles import alpha_bar_exact, dice_sets, nsd_all_pairs

SEEDS = [0, 1, 2]
TIME_LIMIT_S = 30 * 60


def random_mask_pair(rng, max_dim):
    shape = tuple(int(s) for s in rng.integers(1, max_dim + 1, size=3))
    p = rng.uniform(0.02, 0.7)
    return rng.random(shape) < p, rng.random(shape) < p


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    cfg = ExperimentConfig(output_dir=str(out), master_seeds=SEEDS)
    start = time.perf_counter()
    result = run_pipeline(cfg)
    return cfg, result, time.perf_counter() - start


def test_criterion_1_size_accounting():
    start = time.perf_counter()
    n_total = compute_augmented_size(1291, 3, 4)
    sizes = {
        (15, "baseline"): len(expand_with_transforms(range(1291), 15)),
        (15, "augmented"): len(expand_with_transforms(range(n_total), 15)),
        (30, "baseline"): len(expand_with_transforms(range(1291), 30)),
        (30, "augmented"): len(expand_with_transforms(range(n_total), 30)),
    }
    elapsed = time.perf_counter() - start
    expected = {(15, "baseline"): 19365, (15, "augmented"): 77280, (30, "baseline"): 38730, (30, "augmented"): 154560}
    passed = n_total == 5152 and sizes == expected and elapsed < 1.0
    record_criterion(1, "size accounting", passed, f"n_total={n_total}, sizes={sorted(sizes.values())}, {elapsed:.2f}s")
    assert passed


def test_criterion_2_metric_oracles():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    dice_err = max(abs(dice(a, b) - dice_sets(a, b)) for a, b in (random_mask_pair(rng, 8) for _ in range(1000)))
    nsd_err = 0.0
    for _ in range(200):
        a, b = random_mask_pair(rng, 16)
        tau = float(rng.uniform(0.0, 3.0))
        spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.5, 2.0], size=3))
        nsd_err = max(nsd_err, abs(nsd(a, b, tau, spacing) - nsd_all_pairs(a, b, tau, spacing)))
    elapsed = time.perf_counter() - start
    passed = dice_err <= 1e-12 and nsd_err <= 1e-9 and elapsed < 120
    record_criterion(2, "metric oracle equivalence", passed, f"max dice err {dice_err:.1e}, max nsd err {nsd_err:.1e}, {elapsed:.1f}s")
    assert passed


def test_criterion_3_diffusion_numerics():
    start = time.perf_counter()
    rng = np.random.default_rng(3)

    # (a) running product against exact rational arithmetic
    sched = build_schedule(1000, 1e-4, 2e-2)
    exact = alpha_bar_exact(1000, 1e-4, 2e-2)
    rel_a = max(abs(float((Fraction(float(a)) - e) / e)) for a, e in zip(sched.alpha_bar, exact))
    ok_a = rel_a <= 1e-12

    # (b) Monte Carlo moments of the forward process
    t, n = 400, 10_000
    ab = sched.alpha_bar[t]
    z0 = rng.standard_normal((1, 2, 2, 2))
    draws = np.stack([forward_diffuse(z0, t, rng.standard_normal(z0.shape), sched) for _ in range(n)])
    z_mean = np.abs(draws.mean(0) - math.sqrt(ab) * z0) / math.sqrt((1 - ab) / n)
    z_var = np.abs(draws.var(0, ddof=1) - (1 - ab)) / ((1 - ab) * math.sqrt(2 / (n - 1)))
    ok_b = bool(z_mean.max() <= 3 and z_var.max() <= 3)

    # (c) analytic gradient against central finite differences, float64, 4^3 latent
    desk = build_schedule(50, 2e-3, 0.4)
    model = build_denoiser(DiffusionConfig(base_channels=4)).double()
    g = torch.Generator().manual_seed(5)
    z = torch.randn(1, 4, 4, 4, 4, generator=g, dtype=torch.float64)
    cond = torch.randn(1, 6, 4, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(1, 4, 4, 4, 4, generator=g, dtype=torch.float64)
    tt = torch.tensor([17])
    loss = training_loss(model, z, cond, tt, eps, desk)
    model.zero_grad()
    loss.backward()
    worst_c = 0.0
    probes = [(model.inp.weight, (1, 2, 0, 1, 2)), (model.enc.conv2.weight, (0, 3, 1, 1, 1)), (model.out[2].bias, (2,)), (model.time_mlp[0].weight, (3, 1))]
    for param, idx in probes:
        analytic = param.grad[idx].item()
        with torch.no_grad():
            orig = param[idx].item()
            param[idx] = orig + 1e-6
            up = training_loss(model, z, cond, tt, eps, desk).item()
            param[idx] = orig - 1e-6
            down = training_loss(model, z, cond, tt, eps, desk).item()
            param[idx] = orig
        numeric = (up - down) / 2e-6
        worst_c = max(worst_c, abs(analytic - numeric) / max(abs(numeric), 1e-12))
    ok_c = worst_c <= 1e-3

    # (d) plant and recover with a perfect-noise oracle
    planted = torch.from_numpy(rng.standard_normal((1, 4, 4, 4, 4)).astype(np.float32))

    def oracle(x, t_):
        a = float(desk.alpha_bar[int(t_[0])])
        return (x[:, :4] - math.sqrt(a) * planted) / math.sqrt(1 - a)

    c = Conditioning(rng.standard_normal((4, 4, 4, 4)).astype(np.float32), np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))
    recovered = sample(oracle, c, desk, seed=8, sampler="deterministic")
    err_d = float(np.abs(recovered - planted[0].numpy()).max())
    ok_d = err_d <= 1e-4

    elapsed = time.perf_counter() - start
    passed = ok_a and ok_b and ok_c and ok_d and elapsed < 300
    detail = (
        f"(a) rel {rel_a:.1e}; (b) max z mean {z_mean.max():.2f} var {z_var.max():.2f}; "
        f"(c) rel {worst_c:.1e}; (d) err {err_d:.1e}; {elapsed:.1f}s"
    )
    record_criterion(3, "diffusion numerics", passed, detail)
    assert passed


def test_criterion_4_autoencoder_learning(tmp_path):
    start = time.perf_counter()
    cfg = ExperimentConfig()
    data = generate_dataset(cfg.n_train, cfg.n_val, cfg.phantom_spec(seed=404), tmp_path / "data")
    fp_plan = make_plan(extract_fingerprint(data))
    ae_cfg = AEConfig(**cfg.autoencoder, ct_window=fp_plan.ct_window, pet_window=fp_plan.pet_window, epochs=20, seed=4)
    held_out = [data.load_case(r)[0] for r in data.val]
    untrained = reconstruction_mse(build_autoencoder(ae_cfg), held_out)
    trained = reconstruction_mse(train_autoencoder(ae_cfg, data).model, held_out)
    ratio = trained / untrained

    contracts = True
    for c in (AEConfig(base_channels=4), AEConfig(base_channels=4, latent_channels=8), AEConfig(base_channels=4, downsample_factor=(4, 4, 4)), AEConfig(base_channels=4, downsample_factor=(2, 4, 2), latent_channels=2)):
        model = build_autoencoder(c)
        x = np.random.default_rng(0).uniform(-1, 1, (2, 16, 16, 16)).astype(np.float32)
        zz = encode(model, x)
        out = decode(model, zz)
        contracts &= zz.shape == (c.latent_channels, *(16 // f for f in c.downsample_factor))
        contracts &= out.shape == x.shape and bool(np.all(np.abs(out) <= 1.0)) and zz.values.size < x.size
    elapsed = time.perf_counter() - start
    passed = ratio <= 0.5 and contracts and elapsed <= 600
    record_criterion(4, "autoencoder learning", passed, f"held-out MSE {trained:.4f} vs untrained {untrained:.4f} (ratio {ratio:.3f}), {elapsed:.0f}s")
    assert passed


def test_criterion_8_planner():
    start = time.perf_counter()
    paper = make_plan(Fingerprint((300, 300, 300), (1.0, 1.0, 1.0), (-100.0, 200.0), (0.5, 9.0), 1291), "paper")
    ok_paper = paper.patch_size == (128, 160, 112) and paper.batch_size == 2 and paper.epochs == 581
    rng = np.random.default_rng(8)
    ok_desk = True
    for _ in range(50):
        shape = tuple(int(s) for s in rng.integers(8, 200, size=3))
        lo = float(rng.uniform(-1000, 0))
        plan = make_plan(Fingerprint(shape, (1.0, 1.0, 1.0), (lo, lo + 500), (0.1, 10.0), 5))
        ok_desk &= all(d % 2**k == 0 and d >= 8 for d, k in zip(plan.patch_size, plan.pool_depth))
    elapsed = time.perf_counter() - start
    passed = ok_paper and ok_desk and elapsed < 1.0
    record_criterion(8, "planner", passed, f"paper patch {paper.patch_size}, 50 desk plans divisible={ok_desk}, {elapsed:.3f}s")
    assert passed


@pytest.mark.slow
def test_criterion_5_synthesis_locality(desk_run, tmp_path):
    cfg, result, _ = desk_run
    run_dir = result.seeds[0].run_dir
    start = time.perf_counter()
    models = SynthesisModels.load(
        run_dir / "models" / "autoencoder.safetensors",
        run_dir / "models" / "diffusion.safetensors",
        sampler=cfg.sampler,
        radius_range_mm=tuple(cfg.phantom_spec().lesion_radius_range_mm),
    )
    base = read_manifest(run_dir / "data" / "manifest.json")
    windows = (models.ae.cfg.ct_window, models.ae.cfg.pet_window)
    local, measured = 0, 0
    for i in range(30):
        rec = base.train[i % len(base.train)]
        volume, lesion, _ = base.load_case(rec)
        out = synthesize_volume(volume, lesion, models, derive_seed(555, i), rec.case_id)
        if isinstance(out, Rejection):
            continue
        measured += 1
        outside, inside = locality(out, windows, dilation=2, reference=volume)
        local += outside <= inside
    fraction = local / max(measured, 1)

    grid = Grid((32, 32, 32))
    air = Volume(grid, np.full(grid.shape, -1000.0, np.float32), np.zeros(grid.shape, np.float32))
    rejected_air = isinstance(synthesize_volume(air, LabelMap(grid, np.zeros(grid.shape, np.uint8)), models, 0, "air"), Rejection)

    data = tmp_path / "data"
    shutil.copytree(run_dir / "data", data)
    forced = read_manifest(data / "manifest.json")
    for rec in forced.train[:2]:
        save_volume(air, forced.resolve(rec.volume_path))
    aug, combined = build_augmented_dataset(forced, models, tmp_path / "aug", 3, master_seed=1)
    n_real, n_rej = aug.n_real, len(aug.rejected_source_cases)
    identity = aug.n_total == n_real + 3 * (n_real - n_rej) and len(combined.train) == aug.n_total and n_rej >= 2
    elapsed = time.perf_counter() - start

    passed = measured == 30 and fraction >= 0.9 and rejected_air and identity and elapsed <= 600
    detail = f"local {local}/{measured} ({fraction:.0%}), all-air rejected={rejected_air}, n_total {aug.n_total} = {n_real} + 3x({n_real}-{n_rej}), {elapsed:.0f}s"
    record_criterion(5, "synthesis locality and rejection", passed, detail)
    assert passed


@pytest.mark.slow
def test_criterion_6_directional_claim(desk_run):
    cfg, result, elapsed = desk_run
    wins = {}
    for k in cfg.k_values:
        wins[k] = 0
        for seed in result.seeds:
            dsc = {r.arm: r.dsc for r in seed.table.rows if r.k == k}
            wins[k] += dsc["augmented"] >= dsc["baseline"]
    directional = all(w >= 2 for w in wins.values())
    rho = result.spearman
    passed = directional and rho > 0 and elapsed <= TIME_LIMIT_S
    table = ", ".join(f"K={r.k} {r.arm} {r.training_set_size}: {r.dsc:.4f}" for r in result.summary.rows)
    detail = f"augmented>=baseline seeds {wins}; Spearman {rho:.3f}; {elapsed / 60:.1f} min; {table}"
    record_criterion(6, "directional end-to-end claim", passed, detail)
    assert passed


@pytest.mark.slow
def test_criterion_7_determinism(desk_run, tmp_path):
    cfg, result, _ = desk_run
    first = result.seeds[0]
    again = run_seed(replace(cfg, output_dir=str(tmp_path)), first.seed, tmp_path / f"seed_{first.seed}")
    a, b = first.manifest.checksums(), again.manifest.checksums()
    differing = sorted(name for name in set(a) | set(b) if a.get(name) != b.get(name))
    passed = not differing and len(a) > 0
    record_criterion(7, "determinism", passed, f"{len(a)} deterministic stages compared, differing: {differing or 'none'}")
    assert passed
