"""Synthetic lesion generation and augmented-dataset assembly."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .autoencoder import VolumeAutoencoder, decode, encode, load_autoencoder
from .dataset import CaseRecord, DatasetManifest
from .diffusion import LatentDenoiser, build_conditioning, inpaint_lesions, load_denoiser, sample
from .phantom import SegmentationFailure, pseudo_organ_segment
from .seeding import derive_seed
from .volume import (
    LESION_SUFFIX,
    ORGAN_SUFFIX,
    LabelMap,
    Volume,
    downsample_mask,
    normalize_ct,
    normalize_pet,
    save_labelmap,
    save_volume,
)

log = logging.getLogger(__name__)


class AugmentationError(ValueError):
    pass


@dataclass
class Rejection:
    case_id: str
    reason: str


@dataclass
class SynthesisModels:
    ae: VolumeAutoencoder
    denoiser: LatentDenoiser
    sampler: str = "deterministic"
    radius_range_mm: Tuple[float, float] = (2.0, 4.0)
    latent_inpainting: bool = True

    @classmethod
    def load(cls, ae_path, diffusion_path, **kwargs) -> "SynthesisModels":
        return cls(load_autoencoder(ae_path), load_denoiser(diffusion_path), **kwargs)


@dataclass
class SynthesisOutput:
    volume: Volume
    lesion_mask: LabelMap
    healthy: Volume
    organ_map: LabelMap


def sample_lesion_mask(organ_map: LabelMap, seed: int, radius_range_mm: Tuple[float, float] = (2.0, 4.0)) -> LabelMap:
    """Ellipsoidal blob centred on a uniformly drawn organ voxel, clipped to the organ support."""
    support = organ_map.labels >= 2
    idx = np.flatnonzero(support)
    if idx.size == 0:
        raise AugmentationError("organ map has no organ voxels (label >= 2)")
    rng = np.random.default_rng(seed)
    center = np.unravel_index(idx[rng.integers(idx.size)], organ_map.shape)
    radii = rng.uniform(*radius_range_mm, size=3)
    spacing = organ_map.grid.spacing
    r2 = sum(
        ((np.arange(n) - c) * s / r).reshape([-1 if a == i else 1 for a in range(3)]) ** 2
        for i, (n, c, s, r) in enumerate(zip(organ_map.shape, center, spacing, radii))
    )
    blob = (r2 <= 1.0) & support
    return LabelMap(organ_map.grid, blob.astype(np.uint8))


def _latent_keep_mask(mask: LabelMap, factor) -> np.ndarray:
    pooled = downsample_mask(mask, factor, mode="any").labels > 0
    return ndimage.binary_dilation(pooled, iterations=1)


def synthesize_volume(
    volume: Volume,
    lesion_mask: LabelMap,
    models: SynthesisModels,
    seed: int,
    case_id: str = "",
    organ_map: Optional[LabelMap] = None,
) -> Union[SynthesisOutput, Rejection]:
    """Generate one lesioned variant of ``volume`` at a freshly sampled lesion mask.

    Existing lesions are inpainted first; the decoded generation replaces the
    healthy volume only inside the new lesion mask, so image and label agree.
    """
    if organ_map is None:
        organ_map = pseudo_organ_segment(volume)
    if isinstance(organ_map, SegmentationFailure):
        return Rejection(case_id, f"pseudo-organ segmentation failed: {organ_map.reason}")
    try:
        new_mask = sample_lesion_mask(organ_map, derive_seed(seed, "mask"), models.radius_range_mm)
    except AugmentationError as exc:
        return Rejection(case_id, str(exc))

    ae, den = models.ae, models.denoiser
    scale = den.cfg.latent_scale
    healthy = inpaint_lesions(volume, lesion_mask, organ_map)
    healthy_latent = encode(ae, healthy)
    cond = build_conditioning(healthy_latent, new_mask, organ_map, latent_scale=scale)
    factor = ae.cfg.downsample_factor
    keep = _latent_keep_mask(new_mask, factor) if models.latent_inpainting else None
    z = sample(den, cond, den.cfg.schedule(), derive_seed(seed, "sample"), models.sampler, keep_mask=keep)
    generated = decode(ae, z / scale)

    ct_w, pet_w = ae.cfg.ct_window, ae.cfg.pet_window
    gen_volume = Volume.from_normalized(generated, volume.grid, ct_w, pet_w)
    region = new_mask.labels > 0
    ct = np.where(region, gen_volume.ct, healthy.ct)
    pet = np.where(region, gen_volume.pet, healthy.pet)
    return SynthesisOutput(Volume(volume.grid, ct, pet), new_mask, healthy, organ_map)


def locality(
    out: SynthesisOutput, windows=None, dilation: int = 2, reference: Optional[Volume] = None
) -> Tuple[float, float]:
    """Mean absolute change (normalized units, both channels) outside the dilated lesion and inside it.

    Changes are measured against ``reference`` (the source volume, say) or,
    by default, against the inpainted healthy volume.
    """
    if windows is None:
        windows = ((-1024.0, 1024.0), (0.0, 20.0))
    ct_w, pet_w = windows
    ref = out.healthy if reference is None else reference
    diff = 0.5 * (
        np.abs(normalize_ct(out.volume.ct, ct_w) - normalize_ct(ref.ct, ct_w))
        + np.abs(normalize_pet(out.volume.pet, pet_w) - normalize_pet(ref.pet, pet_w))
    )
    inside = out.lesion_mask.labels > 0
    dilated = ndimage.binary_dilation(inside, iterations=dilation)
    return float(diff[~dilated].mean()), float(diff[inside].mean())


def synthesize_case(
    manifest: DatasetManifest,
    record: CaseRecord,
    models: SynthesisModels,
    seed: int,
    out_dir,
    synthetic_id: Optional[str] = None,
) -> Union[CaseRecord, Rejection]:
    """Synthesize one case from ``record`` and write it under ``out_dir/augmented``."""
    volume, lesion, _ = manifest.load_case(record)
    out = synthesize_volume(volume, lesion, models, seed, record.case_id)
    if isinstance(out, Rejection):
        return out
    return _write_synthetic(out, record, Path(out_dir), synthetic_id or f"{record.case_id}_syn")


def _write_synthetic(out: SynthesisOutput, source: CaseRecord, out_dir: Path, case_id: str) -> CaseRecord:
    case_dir = out_dir / "augmented"
    case_dir.mkdir(parents=True, exist_ok=True)
    save_volume(out.volume, case_dir / f"{case_id}.nii.gz")
    save_labelmap(out.lesion_mask, case_dir / f"{case_id}{LESION_SUFFIX}.nii.gz")
    save_labelmap(out.organ_map, case_dir / f"{case_id}{ORGAN_SUFFIX}.nii.gz")
    return CaseRecord(
        case_id=case_id,
        volume_path=f"augmented/{case_id}.nii.gz",
        lesion_mask_path=f"augmented/{case_id}{LESION_SUFFIX}.nii.gz",
        organ_map_path=f"augmented/{case_id}{ORGAN_SUFFIX}.nii.gz",
        provenance="synthetic",
        split="train",
        source_case_id=source.case_id,
    )


def compute_augmented_size(n_real: int, synth_per_case: int, n_rejected_sources: int) -> int:
    """Real cases plus ``synth_per_case`` syntheses for every non-rejected source."""
    if min(n_real, synth_per_case, n_rejected_sources) < 0:
        raise ValueError("counts must be non-negative")
    if n_rejected_sources > n_real:
        raise ValueError("cannot reject more sources than there are real cases")
    return n_real + synth_per_case * (n_real - n_rejected_sources)


@dataclass
class AugmentationManifest:
    n_real: int
    synth_per_case: int
    rejected_source_cases: List[str]
    n_total: int
    links: Dict[str, str] = field(default_factory=dict)  # synthetic case id -> source case id

    def __post_init__(self):
        expected = compute_augmented_size(self.n_real, self.synth_per_case, len(self.rejected_source_cases))
        if self.n_total != expected:
            raise AugmentationError(f"n_total {self.n_total} != {expected} implied by the counts")
        if len(self.links) != self.n_total - self.n_real:
            raise AugmentationError(f"{len(self.links)} synthetic links for {self.n_total - self.n_real} syntheses")
        rejected = set(self.rejected_source_cases)
        if rejected & set(self.links.values()):
            raise AugmentationError("a rejected source has synthetic cases")

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "AugmentationManifest":
        return cls(**json.loads(Path(path).read_text()))


def build_augmented_dataset(
    manifest: DatasetManifest,
    models: SynthesisModels,
    out_dir,
    synth_per_case: int = 3,
    master_seed: int = 0,
) -> Tuple[AugmentationManifest, DatasetManifest]:
    """Synthesize ``synth_per_case`` variants per real training case.

    A rejection of any synthesis voids every synthesis of that source case.
    Writes ``augmentation.json`` and a combined ``manifest.json`` (real train,
    synthetic train, untouched val) into ``out_dir``.
    """
    out_dir = Path(out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    real = [c for c in manifest.train if c.provenance == "real"]
    if not real:
        raise AugmentationError("manifest has no real training cases")

    synthetic: List[CaseRecord] = []
    rejected: List[str] = []
    for rec in sorted(real, key=lambda c: c.case_id):
        volume, lesion, _ = manifest.load_case(rec)
        organs = pseudo_organ_segment(volume)
        outputs = []
        for j in range(synth_per_case):
            out = synthesize_volume(volume, lesion, models, derive_seed(master_seed, "synth", rec.case_id, j), rec.case_id, organs)
            if isinstance(out, Rejection):
                log.warning("rejected source %s: %s", rec.case_id, out.reason)
                rejected.append(rec.case_id)
                break
            outputs.append(out)
        else:
            for j, out in enumerate(outputs):
                synthetic.append(_write_synthetic(out, rec, out_dir, f"{rec.case_id}_syn{j}"))
    if synth_per_case and not synthetic:
        log.warning("no successful syntheses; augmented dataset equals the real training set")

    aug = AugmentationManifest(
        n_real=len(real),
        synth_per_case=synth_per_case,
        rejected_source_cases=rejected,
        n_total=len(real) + len(synthetic),
        links={c.case_id: c.source_case_id for c in synthetic},
    )
    aug.write(out_dir / "augmentation.json")
    base = manifest.rebased(out_dir)
    combined = DatasetManifest(
        out_dir,
        [c for c in base.train if c.provenance == "real"] + synthetic + base.val,
    )
    combined.write(out_dir / "manifest.json")
    return aug, combined
