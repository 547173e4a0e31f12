"""Dataset fingerprinting and nnU-Net-style experiment planning."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .dataset import DatasetManifest
from .phantom import BODY_THRESHOLD_HU
from .seeding import rng
from .volume import CT_WINDOW, PET_WINDOW

PAPER_PATCH_SIZE = (128, 160, 112)
PAPER_POOL_DEPTH = (5, 5, 4)
PAPER_BATCH_SIZE = 2
PAPER_EPOCHS = 581

DESK_MAX_PATCH = 64
DESK_POOL_DEPTH = 3
DESK_BATCH_SIZE = 2
DESK_EPOCHS = 20
DESK_BASE_CHANNELS = 8
MIN_PATCH_DIM = 8

VOXELS_PER_CASE = 100_000


class PlanningError(ValueError):
    pass


@dataclass(frozen=True)
class Fingerprint:
    median_shape: Tuple[int, int, int]
    median_spacing: Tuple[float, float, float]
    ct_percentiles: Tuple[float, float]
    pet_percentiles: Tuple[float, float]
    case_count: int

    def __post_init__(self):
        if self.case_count < 1:
            raise PlanningError("fingerprint needs at least one case")
        for name in ("ct_percentiles", "pet_percentiles"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise PlanningError(f"{name} out of order: {lo} > {hi}")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "Fingerprint":
        d = json.loads(Path(path).read_text())
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Plan:
    patch_size: Tuple[int, int, int]
    pool_depth: Tuple[int, int, int]
    batch_size: int
    epochs: int
    base_channels: int
    norm_windows: Dict[str, Tuple[float, float]]

    def __post_init__(self):
        if self.batch_size < 1:
            raise PlanningError("batch_size must be >= 1")
        for dim, depth in zip(self.patch_size, self.pool_depth):
            if dim < MIN_PATCH_DIM:
                raise PlanningError(f"patch dims must be >= {MIN_PATCH_DIM}, got {self.patch_size}")
            if dim % (2**depth):
                raise PlanningError(f"patch {self.patch_size} not divisible by 2**{self.pool_depth}")

    @property
    def ct_window(self) -> Tuple[float, float]:
        return tuple(self.norm_windows["ct"])

    @property
    def pet_window(self) -> Tuple[float, float]:
        return tuple(self.norm_windows["pet"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm_windows"] = {k: list(v) for k, v in self.norm_windows.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Plan":
        return cls(
            patch_size=tuple(d["patch_size"]),
            pool_depth=tuple(d["pool_depth"]),
            batch_size=int(d["batch_size"]),
            epochs=int(d["epochs"]),
            base_channels=int(d["base_channels"]),
            norm_windows={k: tuple(v) for k, v in d["norm_windows"].items()},
        )

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "Plan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def extract_fingerprint(manifest: DatasetManifest, seed: int = 0) -> Fingerprint:
    """Summarise the training split: median geometry and foreground intensity percentiles.

    Foreground is every voxel with a lesion or organ-map label > 0; cases
    without an organ map fall back to the CT body threshold. At most
    ``VOXELS_PER_CASE`` foreground voxels per case are sampled.
    """
    cases = manifest.train
    if not cases:
        raise PlanningError("manifest has no training cases")
    shapes, spacings, ct_vals, pet_vals = [], [], [], []
    for rec in cases:
        volume, lesion, organs = manifest.load_case(rec)
        shapes.append(volume.shape)
        spacings.append(volume.grid.spacing)
        fg = lesion.labels > 0
        fg |= organs.labels > 0 if organs is not None else volume.ct > BODY_THRESHOLD_HU
        idx = np.flatnonzero(fg)
        if idx.size > VOXELS_PER_CASE:
            idx = np.sort(rng(seed, "fingerprint", rec.case_id).choice(idx, VOXELS_PER_CASE, replace=False))
        ct_vals.append(volume.ct.ravel()[idx])
        pet_vals.append(volume.pet.ravel()[idx])
    ct = np.concatenate(ct_vals).astype(np.float64)
    pet = np.concatenate(pet_vals).astype(np.float64)
    if ct.size == 0:
        ct = np.array(CT_WINDOW)
        pet = np.array(PET_WINDOW)
    return Fingerprint(
        median_shape=tuple(int(np.median(a)) for a in zip(*shapes)),
        median_spacing=tuple(float(np.median(a)) for a in zip(*spacings)),
        ct_percentiles=(float(np.percentile(ct, 0.5)), float(np.percentile(ct, 99.5))),
        pet_percentiles=(float(np.percentile(pet, 0.5)), float(np.percentile(pet, 99.5))),
        case_count=len(cases),
    )


def _clamp_window(pct: Tuple[float, float], default: Tuple[float, float]) -> Tuple[float, float]:
    lo = float(np.clip(pct[0], *default))
    hi = float(np.clip(pct[1], *default))
    if hi - lo < 1e-3 * (default[1] - default[0]):
        return tuple(default)
    return lo, hi


def desk_axis(median_dim: int) -> Tuple[int, int]:
    """Patch dim and pool depth for one axis under the desk profile."""
    cap = min(int(median_dim), DESK_MAX_PATCH)
    if cap < MIN_PATCH_DIM:
        raise PlanningError(f"median dim {median_dim} too small for a depth-1 network")
    depth = DESK_POOL_DEPTH
    while depth > 0 and (cap // 2**depth) * 2**depth < MIN_PATCH_DIM:
        depth -= 1
    return (cap // 2**depth) * 2**depth, depth


def make_plan(fp: Fingerprint, profile: str = "desk") -> Plan:
    norm_windows = {
        "ct": _clamp_window(fp.ct_percentiles, CT_WINDOW),
        "pet": _clamp_window(fp.pet_percentiles, PET_WINDOW),
    }
    if profile == "paper":
        return Plan(
            patch_size=PAPER_PATCH_SIZE,
            pool_depth=PAPER_POOL_DEPTH,
            batch_size=PAPER_BATCH_SIZE,
            epochs=PAPER_EPOCHS,
            base_channels=32,
            norm_windows=norm_windows,
        )
    if profile != "desk":
        raise PlanningError(f"unknown profile {profile!r}")
    patch, depth = zip(*(desk_axis(d) for d in fp.median_shape))
    return Plan(
        patch_size=tuple(patch),
        pool_depth=tuple(depth),
        batch_size=DESK_BATCH_SIZE,
        epochs=DESK_EPOCHS,
        base_channels=DESK_BASE_CHANNELS,
        norm_windows=norm_windows,
    )
