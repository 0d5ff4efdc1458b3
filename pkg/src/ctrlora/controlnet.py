"""Base ControlNet with switchable condition-specific LoRA adapters.

The ControlNet is a trainable copy of the UNet encoder. The condition enters
through a fusion layer added after the copied input convolution, and each
encoder output (every skip plus the bottleneck) leaves through its own
zero-initialized 1x1 convolution. Those outputs are the control residuals
consumed by :func:`ctrlora.unet.unet_decode`.
"""

from __future__ import annotations

import copy
from typing import Literal, Optional, Sequence

import torch
import torch.nn as nn

from .errors import CompatibilityError, ShapeError
from .digests import topology_digest
from .lora import (AdapterSlot, LoraAdapter, ZeroConv, bind_routing, check_adapter_fits, init_adapter,
                   lora_targets)
from .unet import UNet, unet_decode

EmbeddingKind = Literal["vae", "conv"]


class ConvHintEmbedding(nn.Module):
    """Randomly initialized pixel-space condition embedding (the classic ControlNet hint network)."""

    def __init__(self, out_channels: int, downsample_factor: int, hidden: int = 16):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(3, hidden, 3, padding=1), nn.SiLU()]
        c = hidden
        f = downsample_factor
        while f > 1:
            layers += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.SiLU()]
            c, f = 2 * c, f // 2
        last = nn.Conv2d(c, out_channels, 3, padding=1)
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        self.net = nn.Sequential(*layers, last)

    def forward(self, cond_image):
        return self.net(cond_image)


class BaseControlNet(nn.Module):
    def __init__(self, unet: UNet, embedding: EmbeddingKind = "vae", downsample_factor: int = 4):
        super().__init__()
        self.cfg = unet.cfg
        self.embedding = embedding
        self.encoder = copy.deepcopy(unet.encoder)
        for p in self.encoder.parameters():
            p.requires_grad_(True)
        c0 = self.cfg.channels[0]
        if embedding == "vae":
            # condition latents live in the same space as x_t: start from the copied input conv
            self.fusion = nn.Conv2d(self.cfg.in_channels, c0, 3, padding=1)
            with torch.no_grad():
                self.fusion.weight.copy_(unet.encoder.conv_in.weight)
                self.fusion.bias.zero_()
        elif embedding == "conv":
            self.fusion = ConvHintEmbedding(c0, downsample_factor)
        else:
            raise ValueError(f"unknown embedding {embedding!r}")
        self.zero_convs = nn.ModuleList([ZeroConv(c) for c in self.cfg.channels] + [ZeroConv(self.cfg.channels[-1])])
        self.slot = AdapterSlot()
        bind_routing(self, self.slot)

    def forward(self, x_t, t, class_label, cond) -> list[torch.Tensor]:
        hint = self.fusion(cond)
        feats = self.encoder(x_t, t, class_label, hint=hint)
        tensors = feats.tensors()
        return [zc(f) for zc, f in zip(self.zero_convs, tensors)]

    def base_parameters(self):
        """θ: every parameter owned by the ControlNet itself (adapters excluded)."""
        return list(self.parameters())


def init_base_controlnet(unet: UNet, embedding: EmbeddingKind = "vae", downsample_factor: int = 4) -> BaseControlNet:
    cn = BaseControlNet(unet, embedding, downsample_factor)
    if topology_digest(cn.encoder) != topology_digest(unet.encoder):
        raise CompatibilityError("ControlNet encoder topology differs from the UNet encoder")
    return cn


def attach_lora(cn: BaseControlNet, rank: int, condition_kind: str, seed: int, alpha: Optional[float] = None,
                overrides: bool = True) -> LoraAdapter:
    """New adapter for ``cn``; ``B = 0`` so it is transparent until trained.

    Stage-1 adapters are created with ``overrides=False``: there the norm
    layers and zero-convs are shared parts of the base.
    """
    return init_adapter(cn, rank, condition_kind, seed, alpha, overrides, base_digest=topology_digest(cn))


def switch_adapter(cn: BaseControlNet, adapter: Optional[LoraAdapter]) -> AdapterSlot:
    """Route subsequent forwards through ``adapter`` (``None`` = pure base)."""
    if adapter is not None:
        if adapter.base_digest and adapter.base_digest != topology_digest(cn):
            raise CompatibilityError(f"adapter {adapter.condition_kind!r} was built for a different base topology")
        check_adapter_fits(cn, adapter)
    cn.slot.active = adapter
    return cn.slot


class _Active:
    def __init__(self, cn: BaseControlNet, adapter, strength):
        self.cn, self.adapter, self.strength = cn, adapter, strength

    def __enter__(self):
        self.prev = (self.cn.slot.active, self.cn.slot.strength)
        if self.adapter is not _KEEP:
            switch_adapter(self.cn, self.adapter)
        if self.strength is not None:
            self.cn.slot.strength = float(self.strength)
        return self.cn.slot

    def __exit__(self, *exc):
        self.cn.slot.active, self.cn.slot.strength = self.prev


_KEEP = object()


def active(cn: BaseControlNet, adapter=_KEEP, strength: Optional[float] = None) -> _Active:
    """Context manager: temporarily switch adapter and/or strength, restoring on exit."""
    return _Active(cn, adapter, strength)


def controlnet_forward(cn: BaseControlNet, x_t, t, class_label, cond, adapter=_KEEP,
                       strength: Optional[float] = None) -> list[torch.Tensor]:
    """Control residuals with the given (or currently active) adapter."""
    with active(cn, adapter, strength):
        return cn(x_t, t, class_label, cond)


def compose_controls(cn: BaseControlNet, adapters: Sequence[Optional[LoraAdapter]], weights: Sequence[float],
                     x_t, t, class_label, conds: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Weighted sum of per-adapter residuals, each with its own condition."""
    if not (len(adapters) == len(weights) == len(conds)) or len(adapters) < 1:
        raise ShapeError("adapters, weights and conditions must have the same non-zero length")
    total = None
    for ad, w, c in zip(adapters, weights, conds):
        res = controlnet_forward(cn, x_t, t, class_label, c, adapter=ad)
        if total is None:
            total = [w * r for r in res]
        else:
            total = [acc + w * r for acc, r in zip(total, res)]
    return total


class ControlledDenoiser(nn.Module):
    """Noise prediction ``D(E(x_t), C_{θ,ψ}(c))`` with the frozen UNet."""

    def __init__(self, unet: UNet, cn: Optional[BaseControlNet]):
        super().__init__()
        self.unet = unet
        self.cn = cn

    def forward(self, x_t, t, class_label, cond=None, kind=None):
        feats = self.unet.encoder(x_t, t, class_label)
        if self.cn is None or cond is None:
            return unet_decode(self.unet, feats)
        return unet_decode(self.unet, feats, self.cn(x_t, t, class_label, cond))

    def composed(self, x_t, t, class_label, adapters, weights, conds):
        feats = self.unet.encoder(x_t, t, class_label)
        return unet_decode(self.unet, feats, compose_controls(self.cn, adapters, weights, x_t, t, class_label, conds))


def linear_layer_names(cn: BaseControlNet) -> set[str]:
    return set(lora_targets(cn))
