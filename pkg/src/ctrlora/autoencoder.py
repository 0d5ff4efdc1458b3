"""Small convolutional KL-autoencoder.

It defines the latent space the denoiser operates in and doubles as the
frozen condition-embedding network: condition images go through exactly the
same encoder as training images.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Literal, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InsufficientDataError, InvalidRangeError, NonConvergenceError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AutoencoderConfig:
    image_size: int = 32
    latent_channels: int = 4
    downsample_factor: int = 4
    hidden_channels: int = 16
    kl_weight: float = 1e-6

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ShapeError(f"downsample_factor must be a power of 2, got {f}")
        if self.image_size % f:
            raise ShapeError("image_size must be divisible by downsample_factor")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample_factor))


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class _Res(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.block = nn.Sequential(_gn(c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
                                   _gn(c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1))

    def forward(self, x):
        return x + self.block(x)


class Autoencoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        c, z = config.hidden_channels, config.latent_channels
        enc = [nn.Conv2d(3, c, 3, padding=1)]
        for _ in range(config.n_down):
            enc += [_Res(c), nn.Conv2d(c, c, 3, stride=2, padding=1)]
        enc += [_Res(c), _gn(c), nn.SiLU(), nn.Conv2d(c, 2 * z, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(z, c, 3, padding=1), _Res(c)]
        for _ in range(config.n_down):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c, c, 3, padding=1), _Res(c)]
        dec += [_gn(c), nn.SiLU(), nn.Conv2d(c, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        # reciprocal latent std; set after pretraining
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def _check_image(self, x: torch.Tensor):
        f = self.config.downsample_factor
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected images (N, 3, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ShapeError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {f}")

    def posterior(self, x: torch.Tensor):
        self._check_image(x)
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Scaled posterior mean; deterministic."""
        mean, _ = self.posterior(x)
        return mean * self.latent_scale

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.config.latent_channels:
            raise ShapeError(f"expected latents (N, {self.config.latent_channels}, h, w), got {tuple(z.shape)}")
        return self.decoder(z / self.latent_scale)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(-1.0, 1.0)

    def reconstruction_loss(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        mean, logvar = self.posterior(x)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + (0.5 * logvar).exp() * noise
        rec = self.decoder(z)
        mse = F.mse_loss(rec, x)
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=(1, 2, 3)).mean()
        return mse + self.config.kl_weight * kl, mse


@dataclass(frozen=True)
class LatentTensor:
    values: torch.Tensor
    provenance: Literal["image", "condition"]


def encode(ae: Autoencoder, image: torch.Tensor) -> LatentTensor:
    return LatentTensor(_encode_batched(ae, image), "image")


def embed_condition(ae: Autoencoder, cond_image: torch.Tensor) -> LatentTensor:
    """Condition embedding: the frozen encoder applied to a 3-channel condition image."""
    return LatentTensor(_encode_batched(ae, cond_image), "condition")


def decode(ae: Autoencoder, latent) -> torch.Tensor:
    z = latent.values if isinstance(latent, LatentTensor) else latent
    single = z.ndim == 3
    with torch.no_grad():
        out = ae.decode(z[None] if single else z)
    return out[0] if single else out


@torch.no_grad()
def _encode_batched(ae: Autoencoder, x: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    single = x.ndim == 3
    if single:
        x = x[None]
    out = torch.cat([ae.encode(x[i:i + chunk]) for i in range(0, len(x), chunk)])
    return out[0] if single else out


def psnr(a: torch.Tensor, b: torch.Tensor, cap: float = 99.0) -> torch.Tensor:
    """Per-image PSNR in dB for images in [-1, 1] (peak-to-peak 2)."""
    mse = (a - b).pow(2).flatten(1).mean(1)
    val = 10.0 * torch.log10(4.0 / mse.clamp_min(1e-30))
    return torch.where(mse == 0, torch.full_like(val, cap), val.clamp(max=cap))


@dataclass
class AutoencoderTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 2e-3
    min_psnr: float = 25.0
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 3 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidRangeError("autoencoder training needs steps >= 3, batch_size >= 1, learning_rate > 0")


def pretrain_autoencoder(images: torch.Tensor, config: AutoencoderConfig,
                         train_config: Optional[AutoencoderTrainConfig] = None) -> Autoencoder:
    """Train on images in [-1, 1]; raise if held-out PSNR misses the gate.

    ``latent_scale`` is set to the reciprocal std of the posterior means over
    the training split.
    """
    tc = train_config or AutoencoderTrainConfig()
    if len(images) < 1000:
        raise InsufficientDataError(f"autoencoder pretraining needs >= 1000 images, got {len(images)}")
    torch.manual_seed(tc.seed)
    ae = Autoencoder(config).to(images.dtype)
    n_val = max(1, int(len(images) * tc.holdout_fraction))
    train, val = images[n_val:], images[:n_val]
    gen = torch.Generator().manual_seed(tc.seed)
    opt = torch.optim.Adam(ae.parameters(), lr=tc.learning_rate)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=tc.learning_rate, total_steps=tc.steps,
                                                 pct_start=max(0.05, 2.0 / tc.steps))
    for step in range(tc.steps):
        idx = torch.randint(0, len(train), (tc.batch_size,), generator=gen)
        loss, mse = ae.reconstruction_loss(train[idx], generator=gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0:
            logger.info("autoencoder step %d mse %.5f", step, mse.item())
    ae.eval()
    with torch.no_grad():
        means = torch.cat([ae.posterior(train[i:i + 256])[0] for i in range(0, len(train), 256)])
        ae.latent_scale.fill_(1.0 / float(means.std()))
        rec = torch.cat([ae.decode(ae.encode(val[i:i + 256])) for i in range(0, len(val), 256)])
    val_psnr = float(psnr(rec, val).mean())
    logger.info("autoencoder held-out PSNR %.2f dB", val_psnr)
    if val_psnr < tc.min_psnr:
        raise NonConvergenceError(f"autoencoder held-out PSNR {val_psnr:.2f} dB < {tc.min_psnr} dB")
    for p in ae.parameters():
        p.requires_grad_(False)
    return ae


def config_dict(config: AutoencoderConfig) -> dict:
    return asdict(config)
