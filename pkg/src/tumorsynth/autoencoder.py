"""KL-regularised convolutional autoencoder mapping PET-CT volumes to a latent grid."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import check_finite, load_checkpoint, save_checkpoint
from .dataset import DatasetManifest
from .seeding import derive_seed, torch_generator
from .volume import CT_WINDOW, PET_WINDOW, Grid, ShapeMismatchError, Volume, crop_array

log = logging.getLogger(__name__)


@dataclass
class AEConfig:
    in_channels: int = 2
    latent_channels: int = 4
    downsample_factor: Tuple[int, int, int] = (2, 2, 2)
    base_channels: int = 16
    kl_weight: float = 1e-6
    learning_rate: float = 2e-3
    epochs: int = 20
    batch_size: int = 2
    samples_per_case: int = 1
    patch_size: Optional[Tuple[int, int, int]] = None
    ct_window: Tuple[float, float] = CT_WINDOW
    pet_window: Tuple[float, float] = PET_WINDOW
    seed: int = 0

    def __post_init__(self):
        self.downsample_factor = tuple(int(f) for f in self.downsample_factor)
        self.ct_window = tuple(self.ct_window)
        self.pet_window = tuple(self.pet_window)
        if self.patch_size is not None:
            self.patch_size = tuple(int(p) for p in self.patch_size)
        for f in self.downsample_factor:
            if f < 1 or f & (f - 1):
                raise ValueError(f"downsample factors must be powers of two, got {self.downsample_factor}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.in_channels != 2:
            raise ValueError("the autoencoder takes exactly two channels (CT, PET)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentGrid:
    values: np.ndarray  # (latent_channels, d, h, w)
    source_grid: Grid

    @property
    def shape(self):
        return self.values.shape


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class VolumeAutoencoder(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        self.cfg = cfg
        levels = max(int(math.log2(f)) for f in cfg.downsample_factor)
        strides = [
            tuple(2 if (f >> i) > 1 else 1 for f in cfg.downsample_factor) for i in range(levels)
        ]
        b = cfg.base_channels
        chans = [b * 2**i for i in range(levels + 1)]

        enc = [nn.Conv3d(cfg.in_channels, chans[0], 3, padding=1), _norm(chans[0]), nn.SiLU()]
        for i, s in enumerate(strides):
            enc += [nn.Conv3d(chans[i], chans[i + 1], 3, stride=s, padding=1), _norm(chans[i + 1]), nn.SiLU()]
        enc += [nn.Conv3d(chans[-1], chans[-1], 3, padding=1), _norm(chans[-1]), nn.SiLU()]
        enc += [nn.Conv3d(chans[-1], 2 * cfg.latent_channels, 1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv3d(cfg.latent_channels, chans[-1], 3, padding=1), _norm(chans[-1]), nn.SiLU()]
        dec += [nn.Conv3d(chans[-1], chans[-1], 3, padding=1), _norm(chans[-1]), nn.SiLU()]
        for i in reversed(range(levels)):
            s = strides[i]
            dec += [nn.ConvTranspose3d(chans[i + 1], chans[i], kernel_size=s, stride=s), _norm(chans[i]), nn.SiLU()]
        dec += [nn.Conv3d(chans[0], cfg.in_channels, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def encode_dist(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.encoder(x)
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        mean, logvar = self.encode_dist(x)
        if self.training:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            z = mean + torch.exp(0.5 * logvar) * noise
        else:
            z = mean
        return self.decode(z), mean, logvar


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-element mean KL(q(z|x) || N(0, I))."""
    return 0.5 * torch.mean(mean**2 + logvar.exp() - 1.0 - logvar)


def ae_loss(recon, target, mean, logvar, kl_weight: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return (total, reconstruction MSE); with ``kl_weight == 0`` the total is the MSE term."""
    mse = F.mse_loss(recon, target)
    if kl_weight == 0:
        return mse, mse
    return mse + kl_weight * kl_divergence(mean, logvar), mse


def build_autoencoder(cfg: AEConfig) -> VolumeAutoencoder:
    torch.manual_seed(derive_seed(cfg.seed, "ae-init"))
    return VolumeAutoencoder(cfg)


def _check_divisible(shape: Sequence[int], factor: Sequence[int]) -> None:
    if any(s % f for s, f in zip(shape, factor)):
        raise ShapeMismatchError(f"volume shape {tuple(shape)} not divisible by {tuple(factor)}")


def _as_input(model: VolumeAutoencoder, v: Union[Volume, np.ndarray]) -> Tuple[np.ndarray, Grid]:
    cfg = model.cfg
    if isinstance(v, Volume):
        return v.normalized(cfg.ct_window, cfg.pet_window), v.grid
    arr = np.asarray(v, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[0] != 2:
        raise ShapeMismatchError(f"expected a (2, D, H, W) array, got {arr.shape}")
    return arr, Grid(arr.shape[1:])


@torch.no_grad()
def encode(model: VolumeAutoencoder, v: Union[Volume, np.ndarray]) -> LatentGrid:
    """Posterior-mean latent of a volume (a ``Volume`` or a normalized (2, D, H, W) array)."""
    x, grid = _as_input(model, v)
    _check_divisible(x.shape[1:], model.cfg.downsample_factor)
    was_training = model.training
    model.eval()
    mean, _ = model.encode_dist(torch.from_numpy(x)[None])
    model.train(was_training)
    return LatentGrid(mean[0].numpy().astype(np.float32), grid)


@torch.no_grad()
def decode(model: VolumeAutoencoder, z: Union[LatentGrid, np.ndarray]) -> np.ndarray:
    """Decode a latent into a normalized (2, D, H, W) array bounded in [-1, 1]."""
    values = z.values if isinstance(z, LatentGrid) else np.asarray(z, dtype=np.float32)
    if values.ndim != 4 or values.shape[0] != model.cfg.latent_channels:
        raise ShapeMismatchError(
            f"latent shape {values.shape} inconsistent with {model.cfg.latent_channels} latent channels"
        )
    was_training = model.training
    model.eval()
    out = model.decode(torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))[None])[0]
    model.train(was_training)
    out = out.numpy()
    if isinstance(z, LatentGrid) and out.shape[1:] != z.source_grid.shape:
        raise ShapeMismatchError(f"decoded shape {out.shape[1:]} differs from source {z.source_grid.shape}")
    return out


def decode_volume(model: VolumeAutoencoder, z: LatentGrid) -> Volume:
    return Volume.from_normalized(decode(model, z), z.source_grid, model.cfg.ct_window, model.cfg.pet_window)


def reconstruction_mse(model: VolumeAutoencoder, volumes: Sequence[Volume]) -> float:
    errs = []
    for v in volumes:
        x = v.normalized(model.cfg.ct_window, model.cfg.pet_window)
        errs.append(float(np.mean((decode(model, encode(model, x)) - x) ** 2)))
    return float(np.mean(errs))


@dataclass
class AETrainingResult:
    model: VolumeAutoencoder
    log: List[dict] = field(default_factory=list)


def _patch_size(cfg: AEConfig, shape) -> Tuple[int, int, int]:
    size = cfg.patch_size or shape
    size = tuple(min(p, s) for p, s in zip(size, shape))
    return tuple(p - p % f for p, f in zip(size, cfg.downsample_factor))


def train_autoencoder(cfg: AEConfig, manifest: DatasetManifest) -> AETrainingResult:
    """Fit the autoencoder on the training split; validate on the val split every epoch."""
    train_cases = manifest.train
    if len(train_cases) < 2:
        raise ValueError("autoencoder training needs at least two training cases")
    model = build_autoencoder(cfg)
    train = [manifest.load_case(r)[0].normalized(cfg.ct_window, cfg.pet_window) for r in train_cases]
    val = [manifest.load_case(r)[0].normalized(cfg.ct_window, cfg.pet_window) for r in manifest.val]
    for x in train + val:
        _check_divisible(x.shape[1:], cfg.downsample_factor)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sampler = np.random.default_rng(derive_seed(cfg.seed, "ae-data"))
    noise_gen = torch_generator(derive_seed(cfg.seed, "ae-noise"))

    def val_loss() -> float:
        if not val:
            return float("nan")
        model.eval()
        with torch.no_grad():
            losses = []
            for x in val:
                t = torch.from_numpy(x)[None]
                recon, mean, logvar = model(t)
                losses.append(float(ae_loss(recon, t, mean, logvar, cfg.kl_weight)[0]))
        model.train()
        return float(np.mean(losses))

    rows = []
    model.train()
    for epoch in range(cfg.epochs):
        order = sampler.permutation(np.repeat(np.arange(len(train)), cfg.samples_per_case))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            patches = []
            for i in order[start : start + cfg.batch_size]:
                x = train[i]
                size = _patch_size(cfg, x.shape[1:])
                corner = [int(sampler.integers(0, s - p + 1)) for s, p in zip(x.shape[1:], size)]
                patches.append(crop_array(x, corner, size, fill=-1.0))
            batch = torch.from_numpy(np.stack(patches))
            recon, mean, logvar = model(batch, generator=noise_gen)
            loss, _ = ae_loss(recon, batch, mean, logvar, cfg.kl_weight)
            check_finite(loss.item(), f"autoencoder epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
        rows.append({"epoch": epoch, "train_loss": float(np.mean(batch_losses)), "val_loss": val_loss()})
        log.info("ae epoch %d train %.5f val %.5f", epoch, rows[-1]["train_loss"], rows[-1]["val_loss"])
    model.eval()
    return AETrainingResult(model, rows)


def save_autoencoder(path, model: VolumeAutoencoder):
    return save_checkpoint(path, model, "autoencoder", model.cfg.to_dict())


def load_autoencoder(path) -> VolumeAutoencoder:
    config, state = load_checkpoint(path, "autoencoder")
    model = VolumeAutoencoder(AEConfig(**config))
    model.load_state_dict(state)
    model.eval()
    return model
