"""Low-rank adapters and the layers that route through them.

Adapter switching never mutates base weights. Routed layers consult a shared
:class:`AdapterSlot` at forward time: a Linear adds ``(alpha / r) * B(Ax)`` on
top of its own output, and norm / zero-conv layers swap in the active
adapter's override tensors when it carries them. With no adapter (or a
freshly attached one, where ``B = 0``) the computation is bit-for-bit the
base computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CompatibilityError, ShapeError


def key_of(name: str) -> str:
    """Module path -> ParameterDict-safe key."""
    return name.replace(".", "__")


class AdapterSlot:
    """Holds at most one active adapter. Single writer: the owner of the model."""

    def __init__(self):
        self.active: Optional["LoraAdapter"] = None
        self.strength: float = 1.0

    def __repr__(self):
        kind = None if self.active is None else self.active.condition_kind
        return f"AdapterSlot(active={kind!r}, strength={self.strength})"


class _Routed:
    route_key: str = ""
    slot: Optional[AdapterSlot] = None

    def _adapter(self) -> Optional["LoraAdapter"]:
        return None if self.slot is None else self.slot.active


def lora_linear_forward(weight: torch.Tensor, bias: Optional[torch.Tensor], A: Optional[torch.Tensor],
                        B: Optional[torch.Tensor], scale: float, x: torch.Tensor) -> torch.Tensor:
    """``x W^T + b + scale * (x A^T) B^T``, evaluated additively.

    The low-rank term is added to the untouched base output, so ``B = 0``
    reproduces the base layer exactly.
    """
    y = F.linear(x, weight, bias)
    if A is None:
        return y
    if A.shape[1] != x.shape[-1] or B.shape[0] != weight.shape[0] or A.shape[0] != B.shape[1]:
        raise ShapeError(f"LoRA shapes A{tuple(A.shape)} B{tuple(B.shape)} incompatible with W{tuple(weight.shape)}")
    return y + scale * F.linear(F.linear(x, A), B)


class LoraLinear(nn.Linear, _Routed):
    def forward(self, x):
        ad = self._adapter()
        if ad is None or self.route_key not in ad.lora_A:
            return F.linear(x, self.weight, self.bias)
        return lora_linear_forward(self.weight, self.bias, ad.lora_A[self.route_key], ad.lora_B[self.route_key],
                                   ad.scale, x)


class RoutedGroupNorm(nn.GroupNorm, _Routed):
    def forward(self, x):
        ad = self._adapter()
        if ad is not None and self.route_key in ad.norm_weight:
            return F.group_norm(x, self.num_groups, ad.norm_weight[self.route_key], ad.norm_bias[self.route_key], self.eps)
        return F.group_norm(x, self.num_groups, self.weight, self.bias, self.eps)


class RoutedLayerNorm(nn.LayerNorm, _Routed):
    def forward(self, x):
        ad = self._adapter()
        if ad is not None and self.route_key in ad.norm_weight:
            return F.layer_norm(x, self.normalized_shape, ad.norm_weight[self.route_key], ad.norm_bias[self.route_key], self.eps)
        return F.layer_norm(x, self.normalized_shape, self.weight, self.bias, self.eps)


class ZeroConv(nn.Conv2d, _Routed):
    """1x1 convolution whose kernel and bias start at exactly zero.

    The output is multiplied by the slot's strength.
    """

    def __init__(self, channels: int):
        super().__init__(channels, channels, 1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)

    def forward(self, x):
        ad = self._adapter()
        if ad is not None and self.route_key in ad.zc_weight:
            out = F.conv2d(x, ad.zc_weight[self.route_key], ad.zc_bias[self.route_key])
        else:
            out = F.conv2d(x, self.weight, self.bias)
        strength = 1.0 if self.slot is None else self.slot.strength
        return out if strength == 1.0 else out * strength


def bind_routing(model: nn.Module, slot: AdapterSlot) -> None:
    for name, mod in model.named_modules():
        if isinstance(mod, _Routed):
            mod.route_key = key_of(name)
            mod.slot = slot


def lora_targets(model: nn.Module) -> dict[str, LoraLinear]:
    """Every routed Linear of ``model``, keyed by route key."""
    return {key_of(n): m for n, m in model.named_modules() if isinstance(m, LoraLinear)}


def norm_layers(model: nn.Module) -> dict[str, nn.Module]:
    return {key_of(n): m for n, m in model.named_modules() if isinstance(m, (RoutedGroupNorm, RoutedLayerNorm))}


def zero_convs(model: nn.Module) -> dict[str, ZeroConv]:
    return {key_of(n): m for n, m in model.named_modules() if isinstance(m, ZeroConv)}


class LoraAdapter(nn.Module):
    """Per-condition parameters: LoRA pairs plus optional norm / zero-conv overrides."""

    def __init__(self, condition_kind: str, rank: int, alpha: Optional[float] = None, base_digest: str = ""):
        super().__init__()
        if rank < 1:
            raise ShapeError(f"LoRA rank must be >= 1, got {rank}")
        self.condition_kind = condition_kind
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.base_digest = base_digest
        self.lora_A = nn.ParameterDict()
        self.lora_B = nn.ParameterDict()
        self.norm_weight = nn.ParameterDict()
        self.norm_bias = nn.ParameterDict()
        self.zc_weight = nn.ParameterDict()
        self.zc_bias = nn.ParameterDict()

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def has_overrides(self) -> bool:
        return len(self.norm_weight) > 0 or len(self.zc_weight) > 0

    def lora_parameters(self):
        return list(self.lora_A.values()) + list(self.lora_B.values())

    def override_parameters(self):
        return [*self.norm_weight.values(), *self.norm_bias.values(), *self.zc_weight.values(), *self.zc_bias.values()]

    def delta_weight(self, key: str) -> torch.Tensor:
        """Effective dense update ``scale * B A`` (used for export and rank checks only)."""
        return self.scale * self.lora_B[key] @ self.lora_A[key]

    def header(self) -> dict:
        return {"condition_kind": self.condition_kind, "rank": self.rank, "alpha": self.alpha,
                "base_topology_digest": self.base_digest, "overrides": self.has_overrides,
                "targets": sorted(self.lora_A.keys())}


def init_adapter(model: nn.Module, rank: int, condition_kind: str, seed: int, alpha: Optional[float] = None,
                 overrides: bool = True, base_digest: str = "") -> LoraAdapter:
    """Adapter covering every routed Linear of ``model``.

    ``A ~ N(0, 1/r)`` from a generator seeded with ``seed``; ``B = 0``.
    Overrides, when requested, start as copies of the model's current norm
    and zero-conv tensors.
    """
    ad = LoraAdapter(condition_kind, rank, alpha, base_digest)
    gen = torch.Generator().manual_seed(int(seed))
    for key, lin in sorted(lora_targets(model).items()):
        dtype = lin.weight.dtype
        A = torch.randn(rank, lin.in_features, generator=gen, dtype=torch.float64) / math.sqrt(rank)
        ad.lora_A[key] = nn.Parameter(A.to(dtype))
        ad.lora_B[key] = nn.Parameter(torch.zeros(lin.out_features, rank, dtype=dtype))
    if overrides:
        for key, norm in sorted(norm_layers(model).items()):
            ad.norm_weight[key] = nn.Parameter(norm.weight.detach().clone())
            ad.norm_bias[key] = nn.Parameter(norm.bias.detach().clone())
        for key, zc in sorted(zero_convs(model).items()):
            ad.zc_weight[key] = nn.Parameter(zc.weight.detach().clone())
            ad.zc_bias[key] = nn.Parameter(zc.bias.detach().clone())
    return ad


def check_adapter_fits(model: nn.Module, adapter: LoraAdapter) -> None:
    targets = lora_targets(model)
    if set(adapter.lora_A.keys()) != set(targets):
        raise CompatibilityError("adapter target layers do not match the model's linear layers")
    for key, lin in targets.items():
        if tuple(adapter.lora_A[key].shape) != (adapter.rank, lin.in_features) or \
                tuple(adapter.lora_B[key].shape) != (lin.out_features, adapter.rank):
            raise CompatibilityError(f"adapter tensor shapes differ from model layer {key}")
    norms, zcs = norm_layers(model), zero_convs(model)
    if any(k not in norms for k in adapter.norm_weight.keys()) or any(k not in zcs for k in adapter.zc_weight.keys()):
        raise CompatibilityError("adapter overrides reference layers the model does not have")


@dataclass
class FusedExport:
    state: dict
    note: str = "fused weights are W + scale*B@A; not bitwise equal to the additive forward"


def fuse_adapter(model: nn.Module, adapter: LoraAdapter) -> FusedExport:
    """Materialize ``W + scale * B A`` (and overrides) into a plain state dict, for export."""
    check_adapter_fits(model, adapter)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for name, mod in model.named_modules():
        key = key_of(name)
        if isinstance(mod, LoraLinear):
            state[f"{name}.weight"] = state[f"{name}.weight"] + adapter.delta_weight(key).detach()
        elif key in adapter.norm_weight:
            state[f"{name}.weight"] = adapter.norm_weight[key].detach().clone()
            state[f"{name}.bias"] = adapter.norm_bias[key].detach().clone()
        elif key in adapter.zc_weight:
            state[f"{name}.weight"] = adapter.zc_weight[key].detach().clone()
            state[f"{name}.bias"] = adapter.zc_bias[key].detach().clone()
    return FusedExport(state)
