"""Plan-configured 3D U-Net lesion segmenter with offline transform expansion and sliding-window inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .checkpoint import check_finite, load_checkpoint, save_checkpoint
from .dataset import CaseRecord, DatasetManifest
from .planner import Plan
from .seeding import derive_seed, derive_seeds
from .volume import Grid, LabelMap, Volume, crop_array

log = logging.getLogger(__name__)

MAX_CHANNELS = 320
NUM_CLASSES = 2


# --- network -----------------------------------------------------------------


def _conv_block(cin: int, cout: int, stride=1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


class DynUNet3D(nn.Module):
    """Encoder-decoder with per-axis strided downsampling and skip connections."""

    def __init__(self, plan: Plan, in_channels: int = 2, num_classes: int = NUM_CLASSES):
        super().__init__()
        levels = max(plan.pool_depth)
        self.strides = [tuple(2 if lvl < d else 1 for d in plan.pool_depth) for lvl in range(levels)]
        chans = [min(plan.base_channels * 2**i, MAX_CHANNELS) for i in range(levels + 1)]
        self.encoders = nn.ModuleList(
            [_conv_block(in_channels, chans[0])]
            + [_conv_block(chans[i], chans[i + 1], stride=self.strides[i]) for i in range(levels)]
        )
        self.upsamplers = nn.ModuleList(
            [nn.ConvTranspose3d(chans[i + 1], chans[i], self.strides[i], stride=self.strides[i]) for i in range(levels)]
        )
        self.decoders = nn.ModuleList([_conv_block(2 * chans[i], chans[i]) for i in range(levels)])
        self.head = nn.Conv3d(chans[0], num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        x = skips.pop()
        for i in reversed(range(len(self.decoders))):
            x = self.decoders[i](torch.cat([self.upsamplers[i](x), skips[i]], dim=1))
        return self.head(x)


def build_network(plan: Plan, seed: int = 0) -> DynUNet3D:
    torch.manual_seed(derive_seed(seed, "segmenter-init"))
    return DynUNet3D(plan)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- transforms --------------------------------------------------------------

JITTER_RANGE = (0.9, 1.1)
JITTER_PROBABILITY = 0.5


@dataclass(frozen=True)
class TransformParams:
    flips: Tuple[bool, bool, bool] = (False, False, False)
    rot_k: int = 0
    intensity: Tuple[float, float] = (1.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return not any(self.flips) and self.rot_k == 0 and self.intensity == (1.0, 1.0)


def draw_transform(seed: int) -> TransformParams:
    """Flip each axis with p=0.5, rotate k*90 degrees in the axial (H, W) plane, maybe jitter each channel."""
    rng = np.random.default_rng(seed)
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    rot_k = int(rng.integers(0, 4))
    factors = rng.uniform(*JITTER_RANGE, size=2)
    apply = rng.random(2) < JITTER_PROBABILITY
    intensity = tuple(float(f) if a else 1.0 for f, a in zip(factors, apply))
    return TransformParams(flips, rot_k, intensity)


def _geometric(arr: np.ndarray, params: TransformParams) -> np.ndarray:
    for axis, flip in enumerate(params.flips):
        if flip:
            arr = np.flip(arr, axis=axis)
    if params.rot_k:
        arr = np.rot90(arr, params.rot_k, axes=(1, 2))
    return np.ascontiguousarray(arr)


def apply_transform(v: Volume, m: LabelMap, params: TransformParams) -> Tuple[Volume, LabelMap]:
    spacing = v.grid.spacing
    shape = v.grid.shape
    if params.rot_k % 2:
        spacing = (spacing[0], spacing[2], spacing[1])
        shape = (shape[0], shape[2], shape[1])
    grid = Grid(shape, spacing)
    ct = _geometric(v.ct, params) * params.intensity[0]
    pet = _geometric(v.pet, params) * params.intensity[1]
    return Volume(grid, ct, pet), LabelMap(grid, _geometric(m.labels, params))


def apply_random_transform(v: Volume, m: LabelMap, seed: int) -> Tuple[Volume, LabelMap]:
    return apply_transform(v, m, draw_transform(seed))


class ExpandedSample(NamedTuple):
    case_id: str
    replica: int
    seed: int


def expand_with_transforms(cases, K: int, master_seed: int = 0) -> List[ExpandedSample]:
    """K transformed replicas per case; ``cases`` is a manifest (train split), records or ids."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if isinstance(cases, DatasetManifest):
        cases = cases.train
    ids = [c.case_id if isinstance(c, CaseRecord) else str(c) for c in cases]
    return [
        ExpandedSample(case_id, r, seed)
        for case_id in ids
        for r, seed in enumerate(derive_seeds(master_seed, "transform", case_id, count=K))
    ]


# --- sliding-window inference ------------------------------------------------


def sliding_window_starts(shape: Sequence[int], patch: Sequence[int], overlap: float = 0.5) -> List[List[int]]:
    starts = []
    for dim, p in zip(shape, patch):
        if dim <= p:
            starts.append([0])
            continue
        n = int(np.ceil((dim - p) / (p * (1 - overlap)))) + 1
        starts.append(sorted({int(round(s)) for s in np.linspace(0, dim - p, n)}))
    return starts


def gaussian_importance(patch: Sequence[int], sigma_scale: float = 0.125) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(p, dtype=np.float64) for p in patch], indexing="ij")
    w = np.ones(tuple(patch))
    for g, p in zip(grids, patch):
        w *= np.exp(-0.5 * ((g - (p - 1) / 2) / (p * sigma_scale)) ** 2)
    w /= w.max()
    return np.maximum(w, w[w > 0].min()).astype(np.float32)


@torch.no_grad()
def predict_logits(model: nn.Module, x: np.ndarray, patch: Sequence[int]) -> np.ndarray:
    """Gaussian-blended sliding-window logits for a normalized (2, D, H, W) array."""
    shape = x.shape[1:]
    padded_shape = tuple(max(s, p) for s, p in zip(shape, patch))
    if padded_shape != shape:
        x = crop_array(x, (0, 0, 0), padded_shape, fill=-1.0)
    weight = torch.from_numpy(gaussian_importance(patch))
    acc = torch.zeros((NUM_CLASSES, *padded_shape))
    norm = torch.zeros(padded_shape)
    was_training = model.training
    model.eval()
    zs, ys, xs = sliding_window_starts(padded_shape, patch)
    for z in zs:
        for y in ys:
            for w in xs:
                sl = (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(w, w + patch[2]))
                window = torch.from_numpy(np.ascontiguousarray(x[(slice(None), *sl)]))[None]
                acc[(slice(None), *sl)] += model(window)[0] * weight
                norm[sl] += weight
    model.train(was_training)
    logits = (acc / norm).numpy()
    return logits[:, : shape[0], : shape[1], : shape[2]]


def predict(model: nn.Module, v: Volume, plan: Plan) -> LabelMap:
    x = v.normalized(plan.ct_window, plan.pet_window)
    logits = predict_logits(model, x, plan.patch_size)
    return LabelMap(v.grid, np.argmax(logits, axis=0).astype(np.uint8))


# --- training ----------------------------------------------------------------


@dataclass
class SegConfig:
    plan: Plan
    learning_rate: float = 3e-3
    transforms_per_image: int = 1
    lesion_probability: float = 0.5
    epochs: Optional[int] = None
    seed: int = 0
    lr_schedule: str = "poly"  # "poly" decays to 0 over the run with exponent 0.9; "constant" keeps it fixed

    def __post_init__(self):
        if self.transforms_per_image < 1:
            raise ValueError("transforms_per_image must be >= 1")
        if self.lr_schedule not in ("poly", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def n_epochs(self) -> int:
        return self.plan.epochs if self.epochs is None else self.epochs


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Equal-weight sum of cross-entropy and batch soft Dice loss on the lesion class."""
    ce = F.cross_entropy(logits, target)
    prob = torch.softmax(logits, dim=1)[:, 1]
    fg = (target == 1).float()
    dice = (2 * (prob * fg).sum() + smooth) / (prob.sum() + fg.sum() + smooth)
    return ce + (1 - dice)


@dataclass
class _Sample:
    x: np.ndarray
    y: np.ndarray
    lesion_idx: np.ndarray


def materialize(samples: Sequence[ExpandedSample], manifest: DatasetManifest, plan: Plan) -> List[_Sample]:
    """Load each case once and apply every replica's transform."""
    by_id = {c.case_id: c for c in manifest.cases}
    cache: Dict[str, Tuple[Volume, LabelMap]] = {}
    out = []
    for s in samples:
        if s.case_id not in cache:
            v, m, _ = manifest.load_case(by_id[s.case_id])
            cache[s.case_id] = (v, m)
        v, m = apply_random_transform(*cache[s.case_id], s.seed)
        y = (m.labels > 0).astype(np.int64)
        out.append(_Sample(v.normalized(plan.ct_window, plan.pet_window), y, np.flatnonzero(y)))
    return out


def _draw_patch(s: _Sample, patch, rng: np.random.Generator, lesion_probability: float):
    shape = s.y.shape
    if s.lesion_idx.size and rng.random() < lesion_probability:
        center = np.unravel_index(s.lesion_idx[rng.integers(s.lesion_idx.size)], shape)
        start = [int(np.clip(c - p // 2, 0, max(d - p, 0))) for c, p, d in zip(center, patch, shape)]
    else:
        start = [int(rng.integers(0, max(d - p, 0) + 1)) for p, d in zip(patch, shape)]
    return crop_array(s.x, start, patch, fill=-1.0), crop_array(s.y, start, patch, fill=0)


@dataclass
class SegTrainingResult:
    model: DynUNet3D
    log: List[dict] = field(default_factory=list)
    initial_val_dice: float = float("nan")


def validation_dice(model: nn.Module, val: Sequence[Tuple[Volume, LabelMap]], plan: Plan) -> float:
    if not val:
        return float("nan")
    return float(np.mean([metrics.dice(predict(model, v, plan), m) for v, m in val]))


def train_segmenter(
    cfg: SegConfig,
    samples: Sequence[ExpandedSample],
    manifest: DatasetManifest,
    val_cases: Optional[Sequence[CaseRecord]] = None,
) -> SegTrainingResult:
    """Minimise Dice + CE over lesion-biased patches of the expanded sample list."""
    if not samples:
        raise ValueError("need at least one training sample")
    plan = cfg.plan
    model = build_network(plan, cfg.seed)
    data = materialize(samples, manifest, plan)
    val_cases = manifest.val if val_cases is None else val_cases
    val = [manifest.load_case(r)[:2] for r in val_cases]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    total_steps = cfg.n_epochs * -(-len(data) // plan.batch_size)
    power = 0.9 if cfg.lr_schedule == "poly" else 0.0
    sched = torch.optim.lr_scheduler.PolynomialLR(opt, total_iters=total_steps, power=power)
    rng = np.random.default_rng(derive_seed(cfg.seed, "segmenter-data"))

    initial = validation_dice(model, val, plan)
    rows = []
    model.train()
    for epoch in range(cfg.n_epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), plan.batch_size):
            xs, ys = zip(*(_draw_patch(data[i], plan.patch_size, rng, cfg.lesion_probability) for i in order[start : start + plan.batch_size]))
            x = torch.from_numpy(np.stack(xs))
            y = torch.from_numpy(np.stack(ys))
            loss = dice_ce_loss(model(x), y)
            check_finite(loss.item(), f"segmenter epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        rows.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": validation_dice(model, val, plan), "lr": sched.get_last_lr()[0]})
        log.info("seg epoch %d loss %.4f val dice %.4f", epoch, rows[-1]["train_loss"], rows[-1]["val_dice"])
    model.eval()
    return SegTrainingResult(model, rows, initial)


def save_segmenter(path, model: DynUNet3D, plan: Plan):
    return save_checkpoint(path, model, "segmenter", {"plan": plan.to_dict()})


def load_segmenter(path) -> Tuple[DynUNet3D, Plan]:
    config, state = load_checkpoint(path, "segmenter")
    plan = Plan.from_dict(config["plan"])
    model = DynUNet3D(plan)
    model.load_state_dict(state)
    model.eval()
    return model, plan
