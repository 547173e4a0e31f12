"""Procedural PET-CT body phantoms and a rule-based pseudo-organ labeler.

A phantom is an ellipsoidal soft-tissue body in air holding a few
non-overlapping ellipsoidal organs; lesions sit inside organs with +60 HU CT
contrast and, for PET-avid ("hot") lesions, elevated uptake.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .dataset import CaseRecord, DatasetManifest
from .seeding import derive_seed
from .volume import (
    LESION_SUFFIX,
    ORGAN_SUFFIX,
    Grid,
    LabelMap,
    Volume,
    save_labelmap,
    save_volume,
)

log = logging.getLogger(__name__)

AIR_HU = -1000.0
BODY_HU = 40.0
LESION_CONTRAST_HU = 60.0
ORGAN_HU_OFFSETS = (80.0, 120.0, 160.0, 200.0)
CT_NOISE_HU = 10.0
PET_NOISE_REL = 0.05
HOT_SUV_RANGE = (5.0, 15.0)
ORGAN_SUV_RANGE = (0.5, 2.5)
BODY_SUV_RANGE = (0.6, 1.2)

BODY_THRESHOLD_HU = -200.0
ORGAN_THRESHOLD_HU = BODY_HU + ORGAN_HU_OFFSETS[0] / 2
MIN_ORGAN_VOXELS = 64

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


class PhantomError(ValueError):
    """The phantom spec cannot be realised (e.g. lesions do not fit in any organ)."""


@dataclass(frozen=True)
class PhantomSpec:
    grid: Grid = Grid((48, 48, 48), (1.0, 1.0, 1.0))
    organ_count: int = 3
    lesion_count_range: Tuple[int, int] = (1, 3)
    lesion_radius_range_mm: Tuple[float, float] = (2.0, 4.0)
    hot_lesion_probability: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.organ_count <= len(ORGAN_HU_OFFSETS):
            raise PhantomError(f"organ_count must be in [2, {len(ORGAN_HU_OFFSETS)}]")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise PhantomError(f"bad lesion_count_range {self.lesion_count_range}")
        rmin, rmax = self.lesion_radius_range_mm
        if rmin < 2.0 or rmax < rmin:
            raise PhantomError(f"bad lesion_radius_range_mm {self.lesion_radius_range_mm}")
        if rmax > min(self.grid.extent_mm) / 4:
            raise PhantomError("max lesion radius exceeds a quarter of the smallest grid extent")
        if not 0.0 <= self.hot_lesion_probability <= 1.0:
            raise PhantomError("hot_lesion_probability must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "shape": list(self.grid.shape),
            "spacing": list(self.grid.spacing),
            "organ_count": self.organ_count,
            "lesion_count_range": list(self.lesion_count_range),
            "lesion_radius_range_mm": list(self.lesion_radius_range_mm),
            "hot_lesion_probability": self.hot_lesion_probability,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        grid = Grid(tuple(d.pop("shape", (48, 48, 48))), tuple(d.pop("spacing", (1.0, 1.0, 1.0))))
        for key in ("lesion_count_range", "lesion_radius_range_mm"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(grid=grid, **d)


@dataclass
class LesionInfo:
    organ_label: int
    center: Tuple[int, int, int]
    radii_mm: Tuple[float, float, float]
    hot: bool


@dataclass
class PhantomCase:
    volume: Volume
    lesion_mask: LabelMap
    organ_map_truth: LabelMap
    lesions: List[LesionInfo] = field(default_factory=list)


@dataclass
class SegmentationFailure:
    reason: str


def _mm_coords(grid: Grid):
    return np.meshgrid(
        *[(np.arange(n) + 0.5) * s for n, s in zip(grid.shape, grid.spacing)], indexing="ij"
    )


def _ellipsoid(coords, center_mm, semi_axes_mm) -> np.ndarray:
    r2 = sum(((c - c0) / a) ** 2 for c, c0, a in zip(coords, center_mm, semi_axes_mm))
    return r2 <= 1.0


def _place_organs(rng, spec: PhantomSpec, coords, body: np.ndarray, body_center, body_axes):
    """Lay organs out on a ring in the (H, W) plane around the body centre.

    The ring radius and organ size bounds make neighbouring organs disjoint
    by construction; organs are clipped to the eroded body.
    """
    n = spec.organ_count
    gap = 1.5 * max(spec.grid.spacing)
    b_plane = min(body_axes[1], body_axes[2])
    ring = b_plane / 2 if n == 2 else b_plane / (1 + np.sin(np.pi / n))
    max_plane = min(ring * np.sin(np.pi / n), b_plane - ring) - gap
    max_depth = body_axes[0] * np.sqrt(max(1 - (ring / b_plane) ** 2, 0.0)) - gap
    if min(max_plane, max_depth) <= 0:
        raise PhantomError("body too small to hold the requested organs")
    inner_body = ndimage.binary_erosion(body, SIX_CONNECTED, iterations=1)
    phase = rng.uniform(0, 2 * np.pi)
    regions = []
    for k in range(n):
        angle = phase + 2 * np.pi * k / n
        center = body_center + ring * np.array([0.0, np.cos(angle), np.sin(angle)])
        axes = np.array([max_depth, max_plane, max_plane]) * rng.uniform(0.75, 1.0, size=3)
        regions.append(_ellipsoid(coords, center, axes) & inner_body)
    return regions


def generate_phantom(spec: PhantomSpec) -> PhantomCase:
    """Deterministically build one phantom from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    coords = _mm_coords(grid)
    extent = np.array(grid.extent_mm)
    body_center = extent / 2 + rng.uniform(-0.02, 0.02, size=3) * extent
    body_axes = extent * rng.uniform(0.40, 0.46, size=3)
    body = _ellipsoid(coords, body_center, body_axes)

    organ_map = body.astype(np.uint8)
    ct = np.full(grid.shape, AIR_HU)
    pet = np.zeros(grid.shape)
    ct[body] = BODY_HU
    pet[body] = rng.uniform(*BODY_SUV_RANGE)

    offsets = rng.permutation(ORGAN_HU_OFFSETS)[: spec.organ_count]
    organ_suv = {}
    for i, region in enumerate(_place_organs(rng, spec, coords, body, body_center, body_axes)):
        label = i + 2
        organ_map[region] = label
        organ_suv[label] = rng.uniform(*ORGAN_SUV_RANGE)
        ct[region] = BODY_HU + offsets[i]
        pet[region] = organ_suv[label]

    lesion = np.zeros(grid.shape, dtype=bool)
    infos: List[LesionInfo] = []
    n_lesions = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    organ_labels = list(range(2, spec.organ_count + 2))
    rmin, rmax = spec.lesion_radius_range_mm
    organ_depth = {}
    for _ in range(n_lesions):
        r = rng.uniform(rmin, rmax)
        radii = np.clip(r * rng.uniform(0.85, 1.15, size=3), rmin, rmax)
        hot = bool(rng.random() < spec.hot_lesion_probability)
        free = ndimage.distance_transform_edt(~lesion, sampling=grid.spacing) if lesion.any() else None
        chosen = None
        for attempt_radii in (radii, np.full(3, rmin)):
            need = attempt_radii.max() + 0.5 * max(grid.spacing)
            for label in rng.permutation(organ_labels):
                if label not in organ_depth:
                    organ_depth[label] = ndimage.distance_transform_edt(organ_map == label, sampling=grid.spacing)
                inner = organ_depth[label] >= need
                if free is not None:
                    inner &= free >= need + 1.0
                idx = np.flatnonzero(inner)
                if idx.size:
                    chosen = (int(label), np.unravel_index(idx[rng.integers(idx.size)], grid.shape), attempt_radii)
                    break
            if chosen:
                break
        if chosen is None:
            if not infos:
                raise PhantomError("lesions cannot fit inside any organ for this spec")
            # organs are crowded by earlier lesions; keep what fits
            break
        label, center, radii = chosen
        center_mm = [(c + 0.5) * s for c, s in zip(center, grid.spacing)]
        blob = _ellipsoid(coords, center_mm, radii) & (organ_map == label)
        lesion |= blob
        ct[blob] += LESION_CONTRAST_HU
        if hot:
            pet[blob] = rng.uniform(*HOT_SUV_RANGE)
        infos.append(LesionInfo(label, tuple(int(c) for c in center), tuple(float(x) for x in radii), hot))

    ct = ct + rng.normal(0.0, CT_NOISE_HU, size=grid.shape)
    pet = np.maximum(pet * (1.0 + rng.normal(0.0, PET_NOISE_REL, size=grid.shape)), 0.0)
    return PhantomCase(
        volume=Volume(grid, ct, pet),
        lesion_mask=LabelMap(grid, lesion.astype(np.uint8)),
        organ_map_truth=LabelMap(grid, organ_map),
        lesions=infos,
    )


def pseudo_organ_segment(v: Volume) -> Union[LabelMap, SegmentationFailure]:
    """Label body (1) and bright connected soft-tissue components (2, 3, ...).

    Components are ordered by decreasing size. Returns a ``SegmentationFailure``
    when no organ component of at least ``MIN_ORGAN_VOXELS`` voxels exists.
    """
    body = v.ct > BODY_THRESHOLD_HU
    high = (v.ct > ORGAN_THRESHOLD_HU) & body
    components, n = ndimage.label(high, structure=SIX_CONNECTED)
    labels = body.astype(np.uint8)
    if n:
        sizes = np.bincount(components.ravel(), minlength=n + 1)[1:]
        keep = [i + 1 for i in np.argsort(-sizes, kind="stable") if sizes[i] >= MIN_ORGAN_VOXELS]
        for new_label, comp in enumerate(keep[:253], start=2):
            labels[components == comp] = new_label
    else:
        keep = []
    if not keep:
        return SegmentationFailure(f"no organ component of >= {MIN_ORGAN_VOXELS} voxels")
    return LabelMap(v.grid, labels)


def default_split(n_total: int, train_fraction: float = 0.8) -> Tuple[int, int]:
    """Split a case count into (train, val) with the 80:20 convention."""
    n_train = int(round(n_total * train_fraction))
    return n_train, n_total - n_train


def generate_dataset(
    n_train: int,
    n_val: int,
    spec: PhantomSpec,
    out_dir,
    organ_maps: str = "pseudo",
) -> DatasetManifest:
    """Write ``n_train + n_val`` phantom cases and a ``manifest.json`` under ``out_dir``.

    ``organ_maps`` selects what is recorded as each case's organ map: the
    pseudo-organ labeler output (cases it fails on get none), the phantom
    ground truth, or nothing.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must both be >= 1")
    if organ_maps not in ("pseudo", "truth", "none"):
        raise ValueError(f"unknown organ_maps mode {organ_maps!r}")
    out_dir = Path(out_dir)
    case_dir = out_dir / "cases"
    case_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for index in range(n_train + n_val):
        case_id = f"case_{index:04d}"
        split = "train" if index < n_train else "val"
        case = generate_phantom(replace(spec, seed=derive_seed(spec.seed, "phantom", index)))
        save_volume(case.volume, case_dir / f"{case_id}.nii.gz")
        save_labelmap(case.lesion_mask, case_dir / f"{case_id}{LESION_SUFFIX}.nii.gz")
        organ_rel: Optional[str] = None
        organs = None
        if organ_maps == "truth":
            organs = case.organ_map_truth
        elif organ_maps == "pseudo":
            organs = pseudo_organ_segment(case.volume)
            if isinstance(organs, SegmentationFailure):
                log.warning("pseudo-organ segmentation failed for %s: %s", case_id, organs.reason)
                organs = None
        if organs is not None:
            save_labelmap(organs, case_dir / f"{case_id}{ORGAN_SUFFIX}.nii.gz")
            organ_rel = f"cases/{case_id}{ORGAN_SUFFIX}.nii.gz"
        records.append(
            CaseRecord(
                case_id=case_id,
                volume_path=f"cases/{case_id}.nii.gz",
                lesion_mask_path=f"cases/{case_id}{LESION_SUFFIX}.nii.gz",
                organ_map_path=organ_rel,
                provenance="real",
                split=split,
            )
        )
    manifest = DatasetManifest(out_dir, records)
    manifest.write(out_dir / "manifest.json")
    return manifest
