"""Toy class-conditional denoising UNet, split into an encoder and a decoder.

The decoder accepts optional control residuals: one per skip connection and
one for the bottleneck, added to the corresponding tensor before use.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import DiffusionBatch, NoiseSchedule, diffusion_loss, sample_timesteps
from .errors import InvalidRangeError, NonConvergenceError, ShapeError
from .lora import LoraLinear, RoutedGroupNorm, RoutedLayerNorm

logger = logging.getLogger(__name__)


@dataclass
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 32
    channel_multipliers: list = field(default_factory=lambda: [1, 2, 4])
    attention_levels: list = field(default_factory=lambda: [0, 1])
    num_classes: int = 4
    time_embed_dim: int = 128
    head_dim: int = 32

    def __post_init__(self):
        if len(self.channel_multipliers) < 2:
            raise InvalidRangeError("UNet needs at least 2 resolution levels")
        dims = [self.in_channels, self.base_channels, self.num_classes, self.time_embed_dim, self.head_dim,
                *self.channel_multipliers]
        if min(dims) < 1:
            raise InvalidRangeError("all UNet dimensions must be positive")
        if any(not 0 <= a < len(self.channel_multipliers) for a in self.attention_levels):
            raise InvalidRangeError("attention level out of range")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def null_class(self) -> int:
        return self.num_classes

    def feature_shapes(self, latent_size: int) -> list[tuple[int, int, int]]:
        """Shapes of the skip tensors followed by the bottleneck."""
        shapes = [(c, latent_size >> i, latent_size >> i) for i, c in enumerate(self.channels)]
        return shapes + [shapes[-1]]

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(c: int) -> int:
    return math.gcd(c, 8)


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = RoutedGroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, c_out)
        self.norm2 = RoutedGroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TransformerBlock(nn.Module):
    """Spatial self-attention + MLP; all of its Linears are LoRA targets."""

    def __init__(self, c: int, head_dim: int):
        super().__init__()
        self.heads = max(1, c // head_dim)
        self.norm = RoutedGroupNorm(_groups(c), c)
        self.proj_in = LoraLinear(c, c)
        self.ln1 = RoutedLayerNorm(c)
        self.to_q = LoraLinear(c, c)
        self.to_k = LoraLinear(c, c)
        self.to_v = LoraLinear(c, c)
        self.to_out = LoraLinear(c, c)
        self.ln2 = RoutedLayerNorm(c)
        self.ff1 = LoraLinear(c, 4 * c)
        self.ff2 = LoraLinear(4 * c, c)
        self.proj_out = LoraLinear(c, c)

    def forward(self, x, emb=None):
        n, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        tokens = self.proj_in(tokens)
        y = self.ln1(tokens)

        def split(t):
            return t.reshape(n, h * w, self.heads, c // self.heads).transpose(1, 2)

        q, k, v = split(self.to_q(y)), split(self.to_k(y)), split(self.to_v(y))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c // self.heads), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(n, h * w, c)
        tokens = tokens + self.to_out(y)
        tokens = tokens + self.ff2(F.gelu(self.ff1(self.ln2(tokens))))
        out = self.proj_out(tokens).transpose(1, 2).reshape(n, c, h, w)
        return x + out


class _Level(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, attn: bool, head_dim: int):
        super().__init__()
        self.res = ResBlock(c_in, c_out, emb_dim)
        self.attn = TransformerBlock(c_out, head_dim) if attn else None

    def forward(self, x, emb):
        x = self.res(x, emb)
        return self.attn(x) if self.attn is not None else x


@dataclass
class EncoderFeatures:
    skips: list
    bottleneck: torch.Tensor
    emb: torch.Tensor

    def tensors(self) -> list:
        return [*self.skips, self.bottleneck]


class UNetEncoder(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch, temb = cfg.channels, cfg.time_embed_dim
        self.time_embed = nn.Sequential(nn.Linear(cfg.base_channels, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.class_embed = nn.Embedding(cfg.num_classes + 1, temb)
        self.conv_in = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.levels.append(_Level(prev, c, temb, i in cfg.attention_levels, cfg.head_dim))
            if i < len(ch) - 1:
                self.downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c
        self.mid_res1 = ResBlock(ch[-1], ch[-1], temb)
        self.mid_attn = TransformerBlock(ch[-1], cfg.head_dim)
        self.mid_res2 = ResBlock(ch[-1], ch[-1], temb)

    def embed(self, t: torch.Tensor, class_label: torch.Tensor, dtype) -> torch.Tensor:
        return self.time_embed(timestep_embedding(t, self.cfg.base_channels, dtype)) + self.class_embed(class_label)

    def forward(self, x: torch.Tensor, t: torch.Tensor, class_label: torch.Tensor,
                hint: Optional[torch.Tensor] = None) -> EncoderFeatures:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected latents (N, {self.cfg.in_channels}, h, w), got {tuple(x.shape)}")
        n_levels = len(self.cfg.channels)
        if x.shape[-1] % (1 << (n_levels - 1)) or x.shape[-2] % (1 << (n_levels - 1)):
            raise ShapeError(f"latent spatial dims {tuple(x.shape[-2:])} not divisible by {1 << (n_levels - 1)}")
        t = _as_batch(t, x.shape[0])
        class_label = _as_batch(class_label, x.shape[0])
        emb = self.embed(t, class_label, x.dtype)
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        skips = []
        for i, level in enumerate(self.levels):
            h = level(h, emb)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, emb)), emb)
        return EncoderFeatures(skips, h, emb)


class UNetDecoder(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch, temb = cfg.channels, cfg.time_embed_dim
        self.levels = nn.ModuleList()
        self.ups = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(len(ch))):
            self.levels.append(_Level(prev + ch[i], ch[i], temb, i in cfg.attention_levels, cfg.head_dim))
            if i > 0:
                self.ups.append(nn.Conv2d(ch[i], ch[i], 3, padding=1))
            prev = ch[i]
        self.norm_out = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.in_channels, 3, padding=1)

    def forward(self, features: EncoderFeatures, control_residuals: Optional[Sequence[torch.Tensor]] = None):
        skips = list(features.skips)
        h = features.bottleneck
        if control_residuals is not None:
            expected = features.tensors()
            if len(control_residuals) != len(expected):
                raise ShapeError(f"expected {len(expected)} control residuals, got {len(control_residuals)}")
            for r, f in zip(control_residuals, expected):
                if r.shape != f.shape:
                    raise ShapeError(f"control residual {tuple(r.shape)} does not match feature {tuple(f.shape)}")
            skips = [s + r for s, r in zip(skips, control_residuals[:-1])]
            h = h + control_residuals[-1]
        for j, level in enumerate(self.levels):
            h = level(torch.cat([h, skips[-1 - j]], dim=1), features.emb)
            if j < len(self.ups):
                h = self.ups[j](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def _as_batch(v, n: int) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=torch.long)
    return v.expand(n) if v.ndim == 0 else v


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = UNetEncoder(cfg)
        self.decoder = UNetDecoder(cfg)

    def forward(self, x, t, class_label, control_residuals=None):
        return self.decoder(self.encoder(x, t, class_label), control_residuals)


def unet_encode(unet: UNet, x_t, t, class_label) -> EncoderFeatures:
    return unet.encoder(x_t, t, class_label)


def unet_decode(unet: UNet, features: EncoderFeatures, control_residuals=None) -> torch.Tensor:
    return unet.decoder(features, control_residuals)


@dataclass
class UNetTrainConfig:
    steps: int = 4000
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    cfg_null_prob: float = 0.1
    holdout_fraction: float = 0.1
    loss_gate: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.steps < 3 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidRangeError("UNet training needs steps >= 3, batch_size >= 1, learning_rate > 0")


def drop_labels(labels: torch.Tensor, p: float, null_class: int, generator: torch.Generator) -> torch.Tensor:
    drop = torch.rand(labels.shape, generator=generator) < p
    return torch.where(drop, torch.full_like(labels, null_class), labels)


def heldout_loss(predict, latents: torch.Tensor, labels: torch.Tensor, sched: NoiseSchedule, seed: int = 1234,
                 batch_size: int = 256, cond: Optional[torch.Tensor] = None) -> float:
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(latents), batch_size):
            x0 = latents[i:i + batch_size]
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            t = sample_timesteps(len(x0), sched.T, gen)
            c = None if cond is None else cond[i:i + batch_size]
            batch = DiffusionBatch(x0, c, 0, labels[i:i + batch_size], t, eps)
            total += diffusion_loss(predict, batch, sched).item() * len(x0)
            count += len(x0)
    return total / count


def pretrain_unet(latents: torch.Tensor, labels: torch.Tensor, sched: NoiseSchedule, cfg: UNetConfig,
                  train_config: Optional[UNetTrainConfig] = None) -> UNet:
    """Class-conditional denoiser on pre-encoded latents, with null-label dropout.

    Raises :class:`NonConvergenceError` unless held-out loss is below
    ``loss_gate`` times that of the all-zero predictor.
    """
    tc = train_config or UNetTrainConfig()
    torch.manual_seed(tc.seed)
    unet = UNet(cfg).to(latents.dtype)
    n_val = max(1, int(len(latents) * tc.holdout_fraction))
    tr_x, tr_y, va_x, va_y = latents[n_val:], labels[n_val:], latents[:n_val], labels[:n_val]
    gen = torch.Generator().manual_seed(tc.seed)
    opt = torch.optim.AdamW(unet.parameters(), lr=tc.learning_rate, weight_decay=tc.weight_decay)
    lr_sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=tc.learning_rate, total_steps=tc.steps,
                                                    pct_start=max(0.05, 2.0 / tc.steps))

    def predict(x_t, t, y, c, k):
        return unet(x_t, t, y)

    for step in range(tc.steps):
        idx = torch.randint(0, len(tr_x), (tc.batch_size,), generator=gen)
        x0 = tr_x[idx]
        y = drop_labels(tr_y[idx], tc.cfg_null_prob, cfg.null_class, gen)
        batch = DiffusionBatch(x0, None, 0, y, sample_timesteps(len(x0), sched.T, gen),
                               torch.randn(x0.shape, generator=gen, dtype=x0.dtype))
        loss = diffusion_loss(predict, batch, sched)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(unet.parameters(), 1.0)
        opt.step()
        lr_sched.step()
        if step % 500 == 0:
            logger.info("unet step %d loss %.4f", step, loss.item())
    unet.eval()
    val = heldout_loss(predict, va_x, va_y, sched)
    zero = heldout_loss(lambda x_t, t, y, c, k: torch.zeros_like(x_t), va_x, va_y, sched)
    logger.info("unet held-out loss %.4f (zero predictor %.4f)", val, zero)
    if not val < tc.loss_gate * zero:
        raise NonConvergenceError(f"UNet held-out loss {val:.4f} not below {tc.loss_gate} x {zero:.4f}")
    for p in unet.parameters():
        p.requires_grad_(False)
    return unet
