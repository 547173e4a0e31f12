"""Baseline-vs-augmented comparison: staged pipeline, run manifests, table and scaling-curve output."""

from __future__ import annotations

import csv
import json
import logging
import os
import subprocess
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from . import __version__
from .autoencoder import AEConfig, load_autoencoder, save_autoencoder, train_autoencoder
from .checkpoint import write_log
from .dataset import read_manifest
from .diffusion import DiffusionConfig, save_denoiser, train_diffusion
from .metrics import evaluate
from .phantom import PhantomSpec, generate_dataset
from .planner import Plan, extract_fingerprint, make_plan
from .seeding import configure_torch, derive_seed, sha256_file
from .segmentation import (
    SegConfig,
    expand_with_transforms,
    load_segmenter,
    predict,
    save_segmenter,
    train_segmenter,
)
from .synthesis import AugmentationManifest, SynthesisModels, build_augmented_dataset
from .volume import save_labelmap

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
ARMS = ("baseline", "augmented")
OUTPUT_DIR_ENV = "TUMORSYNTH_OUTPUT_DIR"
THREADS_ENV = "TUMORSYNTH_THREADS"

# Published reference numbers, shown next to measured rows for side-by-side reading only.
REFERENCE_ROWS = (
    (1, "baseline", 1291, 0.3650),
    (1, "augmented", 5152, 0.4542),
    (15, "baseline", 19365, 0.5398),
    (15, "augmented", 77280, 0.6143),
    (30, "baseline", 38730, 0.5859),
    (30, "augmented", 154560, 0.6179),
)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# --- configuration -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/desk"
    master_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    n_train: int = 8
    n_val: int = 4
    phantom: dict = field(default_factory=lambda: {"shape": [32, 32, 32], "lesion_radius_range_mm": [2.0, 3.0]})
    organ_maps: str = "pseudo"
    profile: str = "desk"
    autoencoder: dict = field(default_factory=lambda: {"patch_size": [16, 16, 16], "samples_per_case": 8})
    diffusion: dict = field(default_factory=dict)
    synth_per_case: int = 3
    sampler: str = "deterministic"
    k_values: List[int] = field(default_factory=lambda: [1, 3])
    segmentation: dict = field(default_factory=dict)
    nsd_tolerance_mm: float = 1.0
    threads: int = 1
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} unsupported (expected {CONFIG_VERSION})")
        if not self.master_seeds:
            raise ConfigError("master_seeds must not be empty")
        if not self.k_values or min(self.k_values) < 1:
            raise ConfigError("k_values must be a non-empty list of integers >= 1")
        if self.profile not in ("desk", "paper"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        self.phantom_spec()

    def phantom_spec(self, seed: int = 0) -> PhantomSpec:
        return PhantomSpec.from_dict({**self.phantom, "seed": seed})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    """Read a JSON config, applying the output-dir and thread-count environment overrides."""
    cfg = ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    return apply_env_overrides(cfg)


def apply_env_overrides(cfg: ExperimentConfig) -> ExperimentConfig:
    if os.environ.get(OUTPUT_DIR_ENV):
        cfg = replace(cfg, output_dir=os.environ[OUTPUT_DIR_ENV])
    if os.environ.get(THREADS_ENV):
        cfg = replace(cfg, threads=int(os.environ[THREADS_ENV]))
    return cfg


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --- run manifest ------------------------------------------------------------


@dataclass
class StageRecord:
    outputs: Dict[str, str]  # path relative to the run root -> sha256
    wall_clock_s: float
    deterministic: bool = True


@dataclass
class RunManifest:
    run_id: str
    config: dict
    version: str
    stages: Dict[str, StageRecord] = field(default_factory=dict)

    def checksums(self, deterministic_only: bool = True) -> Dict[str, Dict[str, str]]:
        return {
            name: dict(rec.outputs)
            for name, rec in self.stages.items()
            if rec.deterministic or not deterministic_only
        }

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "version": self.version,
            "stages": {k: asdict(v) for k, v in self.stages.items()},
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        stages = {k: StageRecord(**v) for k, v in d["stages"].items()}
        return cls(d["run_id"], d["config"], d["version"], stages)


def config_run_id(cfg: ExperimentConfig) -> str:
    payload = json.dumps({k: v for k, v in cfg.to_dict().items() if k != "output_dir"}, sort_keys=True)
    return f"run-{derive_seed(0, payload):016x}"


class StageRunner:
    """Runs named stages in order, recording checksums.

    A completed stage with intact outputs is skipped, but once any stage
    re-executes every later stage does too, since its inputs may have changed.
    """

    def __init__(self, root: Path, manifest: RunManifest, manifest_path: Path):
        self.root = root
        self.manifest = manifest
        self.manifest_path = manifest_path
        self.dirty = False

    def _intact(self, rec: StageRecord) -> bool:
        return all(
            (self.root / rel).exists() and sha256_file(self.root / rel) == digest
            for rel, digest in rec.outputs.items()
        )

    def run(self, name: str, fn: Callable[[], Sequence[Path]], deterministic: bool = True) -> bool:
        """Execute ``fn`` unless already done; returns True when the stage actually ran."""
        rec = self.manifest.stages.get(name)
        if not self.dirty and rec is not None and self._intact(rec):
            log.info("stage %s: up to date, skipping", name)
            return False
        self.dirty = True
        start = time.perf_counter()
        try:
            paths = fn()
        except Exception as exc:
            self.manifest.write(self.manifest_path)
            raise StageError(name, exc) from exc
        outputs = {str(Path(p).resolve().relative_to(self.root)): sha256_file(p) for p in sorted(map(Path, paths))}
        self.manifest.stages[name] = StageRecord(outputs, time.perf_counter() - start, deterministic)
        self.manifest.write(self.manifest_path)
        log.info("stage %s: done in %.1fs", name, self.manifest.stages[name].wall_clock_s)
        return True


# --- comparison table and scaling curve --------------------------------------


@dataclass(frozen=True)
class TableRow:
    k: int
    arm: str
    training_set_size: int
    dsc: float


@dataclass
class ComparisonTable:
    rows: List[TableRow]

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (r.k, ARMS.index(r.arm)))
        ks = sorted({r.k for r in self.rows})
        for k in ks:
            arms = [r.arm for r in self.rows if r.k == k]
            missing = set(ARMS) - set(arms)
            if missing:
                raise ValueError(f"K={k} is missing arm(s) {sorted(missing)}")
            if len(arms) != len(ARMS):
                raise ValueError(f"K={k} has duplicate arms")

    def check_sizes(self, n_real: int, n_total: int) -> None:
        for r in self.rows:
            expected = r.k * (n_real if r.arm == "baseline" else n_total)
            if r.training_set_size != expected:
                raise ValueError(f"K={r.k} {r.arm}: size {r.training_set_size} != {expected}")


def emit_table(table: ComparisonTable, out_dir, stem: str = "comparison") -> Tuple[Path, Path]:
    """Write the table as CSV and as aligned text; reference numbers go in a comment block."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["Transforms per image", "Baseline/Augmented", "Training Dataset size", "DSC"]
    body = [[str(r.k), r.arm.capitalize(), str(r.training_set_size), f"{r.dsc:.4f}"] for r in table.rows]

    reference = ["# Published reference values (1614-case real PET-CT dataset; not measured here)"]
    reference += [f"#   K={k:<3d} {arm:<9s} size={size:<7d} DSC={dsc:.4f}" for k, arm, size, dsc in REFERENCE_ROWS]

    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        for line in reference:
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[r.k, r.arm, r.training_set_size, repr(r.dsc)] for r in table.rows])

    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(header)]
    fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    lines = reference + ["", fmt(header), fmt(["-" * w for w in widths])] + [fmt(row) for row in body]
    txt_path = out_dir / f"{stem}.txt"
    txt_path.write_text("\n".join(lines) + "\n")
    return csv_path, txt_path


def read_table(csv_path) -> ComparisonTable:
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return ComparisonTable(
        [TableRow(int(r["Transforms per image"]), r["Baseline/Augmented"], int(r["Training Dataset size"]), float(r["DSC"])) for r in rows]
    )


def scaling_points(table: ComparisonTable) -> List[Tuple[int, float]]:
    return sorted((r.training_set_size, r.dsc) for r in table.rows)


def spearman(points: Sequence[Tuple[float, float]]) -> float:
    sizes, dscs = zip(*points)
    return float(stats.spearmanr(sizes, dscs).statistic)


def emit_scaling_curve(points: Sequence[Tuple[int, float]], out_dir, stem: str = "scaling_curve") -> Tuple[Path, Path]:
    """Write (size, DSC) points sorted by size as CSV and an SVG plot."""
    if len(points) < 2:
        raise ValueError("a scaling curve needs at least two points")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = sorted((int(s), float(d)) for s, d in points)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["training_set_size", "dsc"])
        w.writerows([[s, repr(d)] for s, d in pts])

    with matplotlib.rc_context({"svg.hashsalt": "tumorsynth", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([s for s, _ in pts], [d for _, d in pts], marker="o")
        ax.set_xscale("log")
        ax.set_xlabel("Training dataset size")
        ax.set_ylabel("Validation DSC")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        svg_path = out_dir / f"{stem}.svg"
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return csv_path, svg_path


def aggregate_tables(tables: Sequence[ComparisonTable]) -> ComparisonTable:
    """Seed-averaged DSC per (K, arm); sizes must agree across seeds."""
    groups: Dict[Tuple[int, str], List[TableRow]] = {}
    for t in tables:
        for r in t.rows:
            groups.setdefault((r.k, r.arm), []).append(r)
    rows = []
    for (k, arm), rs in groups.items():
        sizes = {r.training_set_size for r in rs}
        if len(sizes) != 1:
            raise ValueError(f"K={k} {arm}: training-set sizes differ across seeds {sorted(sizes)}")
        rows.append(TableRow(k, arm, sizes.pop(), float(np.mean([r.dsc for r in rs]))))
    return ComparisonTable(rows)


# --- pipeline ----------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    table: ComparisonTable
    manifest: RunManifest
    run_dir: Path


@dataclass
class ExperimentResult:
    seeds: List[SeedResult]
    summary: ComparisonTable
    spearman: float
    out_dir: Path


def _seg_name(arm: str, k: int) -> str:
    return f"{arm}_K{k}"


def run_seed(cfg: ExperimentConfig, master_seed: int, run_dir) -> SeedResult:
    """Run every stage for one master seed inside ``run_dir`` (resumable)."""
    configure_torch(cfg.threads)
    root = Path(run_dir).resolve()
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / "run_manifest.json"
    seed_cfg = {**cfg.to_dict(), "master_seed": master_seed}
    seed_cfg.pop("output_dir")
    run_id = f"{config_run_id(cfg)}-s{master_seed}"
    manifest = RunManifest(run_id, seed_cfg, version_string())
    if manifest_path.exists():
        previous = RunManifest.read(manifest_path)
        if previous.run_id == run_id:
            manifest.stages = previous.stages
    runner = StageRunner(root, manifest, manifest_path)

    data_dir = root / "data"
    aug_dir = root / "augmented"
    models_dir = root / "models"
    models_dir.mkdir(exist_ok=True)

    def phantoms():
        spec = cfg.phantom_spec(derive_seed(master_seed, "phantom-data") % 2**31)
        generate_dataset(cfg.n_train, cfg.n_val, spec, data_dir, cfg.organ_maps)
        return _files_under(data_dir)

    runner.run("phantom", phantoms)
    base = read_manifest(data_dir / "manifest.json")

    def plan_stage():
        fp = extract_fingerprint(base, seed=derive_seed(master_seed, "fingerprint"))
        fp.to_json(root / "fingerprint.json")
        make_plan(fp, cfg.profile).to_json(root / "plan.json")
        return [root / "fingerprint.json", root / "plan.json"]

    runner.run("plan", plan_stage)
    plan = Plan.from_json(root / "plan.json")

    ae_path = models_dir / "autoencoder.safetensors"

    def ae_stage():
        ae_cfg = AEConfig(
            **{**cfg.autoencoder, "ct_window": plan.ct_window, "pet_window": plan.pet_window, "seed": derive_seed(master_seed, "ae")}
        )
        res = train_autoencoder(ae_cfg, base)
        save_autoencoder(ae_path, res.model)
        return [ae_path, write_log(models_dir / "autoencoder_log.csv", res.log)]

    runner.run("autoencoder", ae_stage)

    diff_path = models_dir / "diffusion.safetensors"

    def diff_stage():
        d_cfg = DiffusionConfig(**{**cfg.diffusion, "seed": derive_seed(master_seed, "diffusion")})
        res = train_diffusion(d_cfg, base, load_autoencoder(ae_path))
        save_denoiser(diff_path, res.model)
        return [diff_path, write_log(models_dir / "diffusion_log.csv", res.log)]

    runner.run("diffusion", diff_stage)

    def augment_stage():
        models = SynthesisModels.load(
            ae_path,
            diff_path,
            sampler=cfg.sampler,
            radius_range_mm=tuple(cfg.phantom_spec().lesion_radius_range_mm),
        )
        build_augmented_dataset(base, models, aug_dir, cfg.synth_per_case, derive_seed(master_seed, "augment"))
        return _files_under(aug_dir)

    runner.run("augment", augment_stage)
    aug = AugmentationManifest.read(aug_dir / "augmentation.json")
    augmented = read_manifest(aug_dir / "manifest.json")

    seg_cfg_kwargs = dict(cfg.segmentation)
    datasets = {"baseline": base, "augmented": augmented}
    rows = []
    for k in cfg.k_values:
        for arm in ARMS:
            name = _seg_name(arm, k)
            ckpt = models_dir / f"seg_{name}.safetensors"
            data = datasets[arm]

            def seg_stage(k=k, data=data, ckpt=ckpt, name=name):
                samples = expand_with_transforms(data.train, k, derive_seed(master_seed, "transforms"))
                seg_cfg = SegConfig(plan, transforms_per_image=k, seed=derive_seed(master_seed, "segmenter"), **seg_cfg_kwargs)
                res = train_segmenter(seg_cfg, samples, data)
                save_segmenter(ckpt, res.model, plan)
                initial = [{"epoch": -1, "train_loss": float("nan"), "val_dice": res.initial_val_dice, "lr": seg_cfg.learning_rate}]
                return [ckpt, write_log(models_dir / f"seg_{name}_log.csv", initial + res.log)]

            runner.run(f"train_{name}", seg_stage)

            pred_dir = root / "predictions" / name

            def eval_stage(ckpt=ckpt, pred_dir=pred_dir):
                model, seg_plan = load_segmenter(ckpt)
                pred_dir.mkdir(parents=True, exist_ok=True)
                preds, truths = {}, {}
                for rec in base.val:
                    v, lesion, _ = base.load_case(rec)
                    preds[rec.case_id] = predict(model, v, seg_plan)
                    truths[rec.case_id] = lesion
                    save_labelmap(preds[rec.case_id], pred_dir / f"{rec.case_id}.nii.gz")
                report = evaluate(preds, truths, cfg.nsd_tolerance_mm)
                report.write(pred_dir / "metrics.json", pred_dir / "metrics.csv")
                return sorted(pred_dir.glob("*.nii.gz")) + [pred_dir / "metrics.json", pred_dir / "metrics.csv"]

            runner.run(f"evaluate_{name}", eval_stage)
            dsc = json.loads((pred_dir / "metrics.json").read_text())["mean_dsc"]
            n_cases = len(data.train)
            rows.append(TableRow(k, arm, k * n_cases, dsc))

    table = ComparisonTable(rows)
    table.check_sizes(aug.n_real, aug.n_total)

    def report_stage():
        paths = list(emit_table(table, root))
        paths += list(emit_scaling_curve(scaling_points(table), root))
        return paths

    runner.run("report", report_stage)
    return SeedResult(master_seed, table, manifest, root)


def _files_under(directory: Path) -> List[Path]:
    return sorted(p for p in Path(directory).rglob("*") if p.is_file())


def run_pipeline(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> ExperimentResult:
    """Run all master seeds, then emit the seed-averaged table and scaling curve."""
    out_dir = Path(cfg.output_dir).resolve()
    seeds = list(cfg.master_seeds if seeds is None else seeds)
    results = [run_seed(cfg, s, out_dir / f"seed_{s}") for s in seeds]
    summary = aggregate_tables([r.table for r in results])
    emit_table(summary, out_dir, "summary")
    points = scaling_points(summary)
    emit_scaling_curve(points, out_dir, "summary_scaling_curve")
    rho = spearman(points)
    per_seed = {
        "seeds": {
            str(r.seed): [asdict(row) for row in r.table.rows] for r in results
        },
        "summary": [asdict(row) for row in summary.rows],
        "spearman": rho,
    }
    (out_dir / "results.json").write_text(json.dumps(per_seed, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(results, summary, rho, out_dir)
