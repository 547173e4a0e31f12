"""Command-line entry point: ``tumorsynth <subcommand>`` (or ``python -m tumorsynth``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__


def _phantom_gen(args) -> int:
    from .phantom import PhantomSpec, generate_dataset

    spec = PhantomSpec.from_dict(
        {
            "shape": [args.size] * 3,
            "organ_count": args.organs,
            "lesion_radius_range_mm": args.lesion_radius,
            "seed": args.seed,
        }
    )
    m = generate_dataset(args.n_train, args.n_val, spec, args.out, args.organ_maps)
    print(f"wrote {len(m.cases)} cases to {Path(args.out) / 'manifest.json'}")
    return 0


def _plan(args) -> int:
    from .dataset import read_manifest
    from .planner import extract_fingerprint, make_plan

    fp = extract_fingerprint(read_manifest(args.manifest), seed=args.seed)
    plan = make_plan(fp, args.profile)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.to_json(out)
    if args.fingerprint:
        fp.to_json(args.fingerprint)
    print(json.dumps(plan.to_dict(), indent=2))
    return 0


def _train_ae(args) -> int:
    from .autoencoder import AEConfig, save_autoencoder, train_autoencoder
    from .checkpoint import write_log
    from .dataset import read_manifest
    from .planner import Plan

    kw = {"epochs": args.epochs, "seed": args.seed, "samples_per_case": args.samples_per_case}
    if args.patch:
        kw["patch_size"] = tuple(args.patch)
    if args.plan:
        plan = Plan.from_json(args.plan)
        kw.update(ct_window=plan.ct_window, pet_window=plan.pet_window)
    res = train_autoencoder(AEConfig(**kw), read_manifest(args.manifest))
    save_autoencoder(args.out, res.model)
    write_log(Path(args.out).with_suffix(".log.csv"), res.log)
    print(f"final val loss {res.log[-1]['val_loss']:.6f}")
    return 0


def _train_diff(args) -> int:
    from .autoencoder import load_autoencoder
    from .checkpoint import write_log
    from .dataset import read_manifest
    from .diffusion import DiffusionConfig, save_denoiser, train_diffusion

    cfg = DiffusionConfig(epochs=args.epochs, seed=args.seed)
    res = train_diffusion(cfg, read_manifest(args.manifest), load_autoencoder(args.ae))
    save_denoiser(args.out, res.model)
    write_log(Path(args.out).with_suffix(".log.csv"), res.log)
    print(f"final val loss {res.log[-1]['val_loss']:.6f}; skipped {len(res.skipped)} cases")
    return 0


def _models(args):
    from .synthesis import SynthesisModels

    return SynthesisModels.load(args.ae, args.diffusion, sampler=args.sampler, radius_range_mm=tuple(args.lesion_radius))


def _synthesize(args) -> int:
    from .dataset import read_manifest
    from .synthesis import Rejection, synthesize_case

    m = read_manifest(args.manifest)
    out = synthesize_case(m, m.get(args.case), _models(args), args.seed, args.out)
    if isinstance(out, Rejection):
        print(f"rejected {out.case_id}: {out.reason}")
        return 0
    print(f"wrote {out.case_id} -> {Path(args.out) / out.volume_path}")
    return 0


def _augment(args) -> int:
    from .dataset import read_manifest
    from .synthesis import build_augmented_dataset

    aug, combined = build_augmented_dataset(read_manifest(args.manifest), _models(args), args.out, args.synth_per_case, args.seed)
    print(f"n_real={aug.n_real} n_total={aug.n_total} rejected={aug.rejected_source_cases}")
    return 0


def _train_seg(args) -> int:
    from .checkpoint import write_log
    from .dataset import read_manifest
    from .planner import Plan
    from .segmentation import SegConfig, expand_with_transforms, save_segmenter, train_segmenter

    m = read_manifest(args.manifest)
    plan = Plan.from_json(args.plan)
    cfg = SegConfig(plan, transforms_per_image=args.k, epochs=args.epochs, seed=args.seed)
    res = train_segmenter(cfg, expand_with_transforms(m.train, args.k, args.seed), m)
    save_segmenter(args.out, res.model, plan)
    write_log(Path(args.out).with_suffix(".log.csv"), res.log)
    print(f"val dice: untrained {res.initial_val_dice:.4f}, final {res.log[-1]['val_dice']:.4f}")
    return 0


def _evaluate(args) -> int:
    from .dataset import read_manifest
    from .metrics import evaluate
    from .segmentation import load_segmenter, predict
    from .volume import save_labelmap

    m = read_manifest(args.manifest)
    model, plan = load_segmenter(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds, truths = {}, {}
    for rec in m.split(args.split):
        v, lesion, _ = m.load_case(rec)
        preds[rec.case_id] = predict(model, v, plan)
        truths[rec.case_id] = lesion
        save_labelmap(preds[rec.case_id], out / f"{rec.case_id}.nii.gz")
    report = evaluate(preds, truths, args.tolerance)
    report.write(out / "metrics.json", out / "metrics.csv")
    print(f"mean DSC {report.mean_dsc:.4f}  mean NSD {report.mean_nsd:.4f}")
    return 0


def _experiment(args) -> int:
    from dataclasses import replace

    from .experiment import ExperimentConfig, apply_env_overrides, load_config, run_pipeline

    cfg = load_config(args.config) if args.config else apply_env_overrides(ExperimentConfig())
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    result = run_pipeline(cfg, args.seeds)
    print((result.out_dir / "summary.txt").read_text())
    print(f"Spearman(size, DSC) = {result.spearman:.4f}")
    return 0


def _report(args) -> int:
    from .experiment import emit_scaling_curve, emit_table, read_table, scaling_points, spearman

    table = read_table(args.table)
    out = Path(args.out or Path(args.table).parent)
    _, txt = emit_table(table, out, args.stem)
    points = scaling_points(table)
    emit_scaling_curve(points, out, f"{args.stem}_scaling_curve")
    print(txt.read_text())
    print(f"Spearman(size, DSC) = {spearman(points):.4f}")
    return 0


def _default_config(args) -> int:
    from .experiment import ExperimentConfig

    text = json.dumps(ExperimentConfig().to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tumorsynth", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def radius(sp):
        sp.add_argument("--lesion-radius", type=float, nargs=2, default=[2.0, 4.0], metavar=("MIN", "MAX"))

    def synth_models(sp):
        sp.add_argument("--ae", required=True)
        sp.add_argument("--diffusion", required=True)
        sp.add_argument("--sampler", choices=["deterministic", "ancestral"], default="deterministic")
        radius(sp)

    sp = sub.add_parser("phantom-gen", help="generate a phantom dataset and manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int, default=8)
    sp.add_argument("--n-val", type=int, default=4)
    sp.add_argument("--size", type=int, default=48)
    sp.add_argument("--organs", type=int, default=3)
    sp.add_argument("--organ-maps", choices=["pseudo", "truth", "none"], default="pseudo")
    sp.add_argument("--seed", type=int, default=0)
    radius(sp)
    sp.set_defaults(fn=_phantom_gen)

    sp = sub.add_parser("plan", help="extract a fingerprint and write a plan")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--profile", choices=["desk", "paper"], default="desk")
    sp.add_argument("--out", required=True)
    sp.add_argument("--fingerprint")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_plan)

    sp = sub.add_parser("train-ae", help="train the autoencoder")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--plan")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--samples-per-case", type=int, default=8)
    sp.add_argument("--patch", type=int, nargs=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_train_ae)

    sp = sub.add_parser("train-diff", help="train the latent diffusion model")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ae", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_train_diff)

    sp = sub.add_parser("synthesize", help="synthesize one lesioned case")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--case", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    synth_models(sp)
    sp.set_defaults(fn=_synthesize)

    sp = sub.add_parser("augment", help="build the augmented training set")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--synth-per-case", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    synth_models(sp)
    sp.set_defaults(fn=_augment)

    sp = sub.add_parser("train-seg", help="train the lesion segmenter")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("-k", "--k", type=int, default=1, help="transforms per image")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_train_seg)

    sp = sub.add_parser("evaluate", help="predict and score a split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=["train", "val"], default="val")
    sp.add_argument("--tolerance", type=float, default=1.0, help="NSD tolerance in mm")
    sp.set_defaults(fn=_evaluate)

    sp = sub.add_parser("experiment", help="run the full baseline-vs-augmented comparison")
    sp.add_argument("--config")
    sp.add_argument("--output-dir")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.set_defaults(fn=_experiment)

    sp = sub.add_parser("report", help="re-render a comparison table and scaling curve")
    sp.add_argument("--table", required=True, help="comparison CSV")
    sp.add_argument("--out")
    sp.add_argument("--stem", default="report")
    sp.set_defaults(fn=_report)

    sp = sub.add_parser("default-config", help="print the default experiment config")
    sp.add_argument("--out")
    sp.set_defaults(fn=_default_config)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .seeding import configure_torch

    configure_torch()
    try:
        return args.fn(args)
    except Exception as exc:  # reported, not raised, so the exit code is meaningful
        logging.getLogger("tumorsynth").debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
