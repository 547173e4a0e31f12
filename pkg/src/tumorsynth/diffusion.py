"""Conditional latent DDPM: noise schedule, forward noising, epsilon-prediction training, sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .autoencoder import LatentGrid, VolumeAutoencoder, encode
from .checkpoint import TrainingDivergedError, check_finite, load_checkpoint, save_checkpoint
from .dataset import DatasetManifest
from .seeding import derive_seed, torch_generator
from .volume import LabelMap, ShapeMismatchError, Volume, downsample_mask

log = logging.getLogger(__name__)

Denoiser = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class ScheduleError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule with ``alpha_bar`` as the running product of ``1 - beta``."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def forward_diffuse(z0, t: int, eps, sched: NoiseSchedule):
    """z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps; works on numpy arrays and tensors."""
    if tuple(z0.shape) != tuple(eps.shape):
        raise ShapeMismatchError(f"eps shape {tuple(eps.shape)} differs from z0 shape {tuple(z0.shape)}")
    if not 0 <= int(t) < sched.T:
        raise IndexError(f"timestep {t} outside [0, {sched.T})")
    ab = float(sched.alpha_bar[int(t)])
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def _forward_batch(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    ab = torch.as_tensor(sched.alpha_bar, dtype=z0.dtype)[t].view(-1, *([1] * (z0.ndim - 1)))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


# --- conditioning ------------------------------------------------------------


@dataclass
class Conditioning:
    """Healthy latent plus lesion and organ masks at latent resolution.

    The organ channel encodes background 0, body 0.5, organ 1.0.
    """

    healthy_latent: np.ndarray  # (C, d, h, w)
    tumor_mask_lowres: np.ndarray  # (d, h, w) binary
    organ_mask_lowres: np.ndarray  # (d, h, w) labels

    def __post_init__(self):
        self.healthy_latent = np.asarray(self.healthy_latent, dtype=np.float32)
        spatial = self.healthy_latent.shape[1:]
        for name in ("tumor_mask_lowres", "organ_mask_lowres"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != spatial:
                raise ShapeMismatchError(f"{name} shape {arr.shape} differs from latent grid {spatial}")
            setattr(self, name, arr)

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return self.healthy_latent.shape[1:]

    def channels(self) -> np.ndarray:
        tumor = (self.tumor_mask_lowres > 0).astype(np.float32)
        organ = np.clip(self.organ_mask_lowres.astype(np.float32), 0, 2) / 2.0
        return np.concatenate([self.healthy_latent, tumor[None], organ[None]], axis=0)

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.channels())


def build_conditioning(healthy: LatentGrid, tumor: LabelMap, organs: LabelMap, latent_scale: float = 1.0) -> Conditioning:
    factor = tuple(s // l for s, l in zip(healthy.source_grid.shape, healthy.values.shape[1:]))
    return Conditioning(
        healthy.values * latent_scale,
        downsample_mask(tumor, factor, mode="any").labels,
        downsample_mask(organs, factor).labels,
    )


def concat_input(z_t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Channel-concatenate the noisy latent and conditioning; spatial shapes must match exactly."""
    if z_t.shape[0] != cond.shape[0] or z_t.shape[2:] != cond.shape[2:]:
        raise ShapeMismatchError(f"cannot concatenate {tuple(z_t.shape)} with conditioning {tuple(cond.shape)}")
    return torch.cat([z_t, cond], dim=1)


# --- denoiser ----------------------------------------------------------------


@dataclass
class DiffusionConfig:
    latent_channels: int = 4
    base_channels: int = 16
    T: int = 50
    # 1e-4..2e-2 rescaled by 1000/T so the last step is close to pure noise
    beta_start: float = 2e-3
    beta_end: float = 0.4
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 8
    samples_per_case: int = 16
    latent_scale: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)

    @property
    def cond_channels(self) -> int:
        return self.latent_channels + 2


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class LatentDenoiser(nn.Module):
    """Two-level 3D U-Net predicting the injected noise from (z_t, conditioning, t)."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        emb = 4 * b
        self.emb_dim = b
        self.time_mlp = nn.Sequential(nn.Linear(b, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.inp = nn.Conv3d(cfg.latent_channels + cfg.cond_channels, b, 3, padding=1)
        self.enc = ResBlock(b, b, emb)
        self.down = nn.Conv3d(b, 2 * b, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * b, 2 * b, emb)
        self.up = nn.ConvTranspose3d(2 * b, b, 2, stride=2)
        self.dec = ResBlock(2 * b, b, emb)
        self.out = nn.Sequential(nn.GroupNorm(min(8, b), b), nn.SiLU(), nn.Conv3d(b, cfg.latent_channels, 3, padding=1))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim).to(x.dtype))
        h0 = self.enc(self.inp(x), emb)
        h = self.mid(self.down(h0), emb)
        h = self.up(h)
        if h.shape[2:] != h0.shape[2:]:
            h = F.pad(h, [0, h0.shape[4] - h.shape[4], 0, h0.shape[3] - h.shape[3], 0, h0.shape[2] - h.shape[2]])
        return self.out(self.dec(torch.cat([h, h0], dim=1), emb))


def build_denoiser(cfg: DiffusionConfig) -> LatentDenoiser:
    torch.manual_seed(derive_seed(cfg.seed, "diffusion-init"))
    return LatentDenoiser(cfg)


def training_loss(denoiser: Denoiser, z0: torch.Tensor, cond: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """MSE between ``eps`` and the denoiser's prediction at (z_t, t, conditioning).

    Tensors are batched: ``z0``/``eps`` (B, C, d, h, w), ``cond`` (B, C', d, h, w), ``t`` (B,).
    """
    if z0.shape != eps.shape:
        raise ShapeMismatchError(f"eps shape {tuple(eps.shape)} differs from z0 {tuple(z0.shape)}")
    z_t = _forward_batch(z0, t, eps, sched)
    pred = denoiser(concat_input(z_t, cond), t)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise TrainingDivergedError("non-finite diffusion loss in forward pass")
    return loss


# --- sampling ----------------------------------------------------------------


@torch.no_grad()
def sample(
    denoiser: Denoiser,
    cond: Conditioning,
    sched: NoiseSchedule,
    seed: int,
    sampler: str = "deterministic",
    latent_channels: Optional[int] = None,
    keep_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Run the reverse process from unit-normal noise, returning a (C, d, h, w) latent.

    ``ancestral`` is the DDPM posterior update; ``deterministic`` is the
    eta = 0 DDIM update and injects no noise after initialisation. When
    ``keep_mask`` is given, voxels where it is False are replaced after every
    step by the healthy latent noised to the matching level, so only the
    masked region is generated.
    """
    if sampler not in ("ancestral", "deterministic"):
        raise ValueError(f"unknown sampler {sampler!r}")
    c = cond.healthy_latent.shape[0] if latent_channels is None else latent_channels
    shape = (1, c, *cond.spatial_shape)
    gen = torch_generator(seed)
    z = torch.randn(shape, generator=gen, dtype=torch.float32)
    cond_t = cond.tensor()[None]
    if keep_mask is not None:
        outside = torch.from_numpy(~np.asarray(keep_mask, dtype=bool))[None, None].expand(shape)
        healthy = torch.from_numpy(cond.healthy_latent)[None]
        healthy_eps = torch.randn(shape, generator=gen, dtype=torch.float32)
    for t in reversed(range(sched.T)):
        tt = torch.full((1,), t, dtype=torch.long)
        eps_hat = denoiser(concat_input(z, cond_t), tt)
        ab, ab_prev = float(sched.alpha_bar[t]), sched.alpha_bar_prev(t)
        if sampler == "deterministic":
            x0_hat = (z - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)
            z = math.sqrt(ab_prev) * x0_hat + math.sqrt(1 - ab_prev) * eps_hat
        else:
            beta, alpha = float(sched.beta[t]), float(sched.alpha[t])
            z = (z - beta / math.sqrt(1 - ab) * eps_hat) / math.sqrt(alpha)
            if t > 0:
                var = beta * (1 - ab_prev) / (1 - ab)
                z = z + math.sqrt(var) * torch.randn(shape, generator=gen, dtype=torch.float32)
        if keep_mask is not None:
            known = healthy if t == 0 else _forward_batch(healthy, torch.tensor([t - 1]), healthy_eps, sched)
            z = torch.where(outside, known, z)
        if not torch.all(torch.isfinite(z)):
            raise SamplingError(f"non-finite latent state at step {t}")
    return z[0].numpy()


# --- training ----------------------------------------------------------------


def inpaint_lesions(volume: Volume, lesion: LabelMap, organs: Optional[LabelMap] = None, shell: int = 2) -> Volume:
    """Replace each lesion component with the mean intensity of a ``shell``-voxel ring around it."""
    mask = lesion.labels > 0
    if not mask.any():
        return Volume(volume.grid, volume.ct.copy(), volume.pet.copy())
    ct, pet = volume.ct.copy(), volume.pet.copy()
    support = organs.labels >= 2 if organs is not None else np.ones_like(mask)
    components, n = ndimage.label(mask)
    for k in range(1, n + 1):
        comp = components == k
        ring = ndimage.binary_dilation(comp, iterations=shell) & ~mask
        ring_in = ring & support
        ring = ring_in if ring_in.any() else ring
        if not ring.any():
            continue
        ct[comp] = ct[ring].mean()
        pet[comp] = pet[ring].mean()
    return Volume(volume.grid, ct, pet)


@dataclass
class LatentPair:
    case_id: str
    z0: np.ndarray
    cond: Conditioning


def prepare_pairs(manifest: DatasetManifest, ae: VolumeAutoencoder, split: str = "train") -> Tuple[List[LatentPair], List[str]]:
    """Encode tumoured and lesion-inpainted volumes; returns (pairs, skipped case ids)."""
    pairs, skipped = [], []
    for rec in manifest.split(split):
        if not rec.organ_map_path:
            skipped.append(rec.case_id)
            continue
        volume, lesion, organs = manifest.load_case(rec)
        z0 = encode(ae, volume)
        healthy = encode(ae, inpaint_lesions(volume, lesion, organs))
        pairs.append(LatentPair(rec.case_id, z0.values, build_conditioning(healthy, lesion, organs)))
    return pairs, skipped


@dataclass
class DiffusionTrainingResult:
    model: LatentDenoiser
    log: List[dict]
    skipped: List[str]


def _scaled(pairs: List[LatentPair], scale: float):
    z = torch.from_numpy(np.stack([p.z0 for p in pairs]) * scale)
    conds = []
    for p in pairs:
        ch = p.cond.channels()
        ch[: p.z0.shape[0]] *= scale
        conds.append(ch)
    return z, torch.from_numpy(np.stack(conds))


def train_diffusion(cfg: DiffusionConfig, manifest: DatasetManifest, ae: VolumeAutoencoder) -> DiffusionTrainingResult:
    """Fit the epsilon-prediction denoiser on latent pairs of every training case with an organ map."""
    pairs, skipped = prepare_pairs(manifest, ae, "train")
    if skipped:
        log.warning("skipped %d training cases without organ maps: %s", len(skipped), skipped)
    if not pairs:
        raise ValueError("every training case was skipped; no organ maps available")
    val_pairs, _ = prepare_pairs(manifest, ae, "val")

    std = float(np.std(np.stack([p.z0 for p in pairs])))
    cfg = replace(cfg, latent_scale=1.0 / std if std > 0 else 1.0, latent_channels=pairs[0].z0.shape[0])
    sched = cfg.schedule()
    model = build_denoiser(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch_generator(derive_seed(cfg.seed, "diffusion-train"))

    z_train, c_train = _scaled(pairs, cfg.latent_scale)
    if val_pairs:
        z_val, c_val = _scaled(val_pairs, cfg.latent_scale)
        vgen = torch_generator(derive_seed(cfg.seed, "diffusion-val"))
        reps = 4
        z_val, c_val = z_val.repeat(reps, 1, 1, 1, 1), c_val.repeat(reps, 1, 1, 1, 1)
        t_val = torch.randint(0, sched.T, (len(z_val),), generator=vgen)
        eps_val = torch.randn(z_val.shape, generator=vgen)

    rows = []
    n = len(pairs)
    for epoch in range(cfg.epochs):
        model.train()
        idx = torch.randperm(n * cfg.samples_per_case, generator=gen) % n
        losses = []
        for start in range(0, len(idx), cfg.batch_size):
            b = idx[start : start + cfg.batch_size]
            t = torch.randint(0, sched.T, (len(b),), generator=gen)
            eps = torch.randn(z_train[b].shape, generator=gen)
            loss = training_loss(model, z_train[b], c_train[b], t, eps, sched)
            check_finite(loss.item(), f"diffusion epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_loss = float("nan")
        if val_pairs:
            model.eval()
            with torch.no_grad():
                val_loss = float(training_loss(model, z_val, c_val, t_val, eps_val, sched))
        rows.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss})
        log.info("diffusion epoch %d train %.5f val %.5f", epoch, rows[-1]["train_loss"], val_loss)
    model.eval()
    return DiffusionTrainingResult(model, rows, skipped)


def save_denoiser(path, model: LatentDenoiser):
    return save_checkpoint(path, model, "diffusion", model.cfg.to_dict())


def load_denoiser(path) -> LatentDenoiser:
    config, state = load_checkpoint(path, "diffusion")
    model = LatentDenoiser(DiffusionConfig(**config))
    model.load_state_dict(state)
    model.eval()
    return model
