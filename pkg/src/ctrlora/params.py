"""Static parameter accounting for a ControlNet and its per-condition adapters.

Counts come from a layer descriptor: either the bundled description of the
Stable Diffusion 1.5 ControlNet (``sd15-encoder``), which is never
instantiated, or one read off a live :class:`BaseControlNet`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import torch.nn as nn

from .errors import ConfigError
from .lora import LoraAdapter, LoraLinear, RoutedGroupNorm, RoutedLayerNorm, ZeroConv, key_of


@dataclass(frozen=True)
class LayerSpec:
    """One parameterized layer.

    ``role`` is ``lora`` (a LoRA target linear), ``norm``, ``zero_conv`` or
    ``other``. For linears ``d_in``/``d_out`` are the matrix dims; for convs
    they are channels and ``kernel`` the spatial size.
    """

    name: str
    role: str
    d_in: int
    d_out: int
    kernel: int = 1
    bias: bool = True

    @property
    def weight_count(self) -> int:
        if self.role == "norm":
            return self.d_out
        return self.d_in * self.d_out * self.kernel * self.kernel

    @property
    def count(self) -> int:
        return self.weight_count + (self.d_out if self.bias else 0)

    def lora_count(self, rank: int) -> int:
        return rank * (self.d_in + self.d_out) if self.role == "lora" else 0


@dataclass
class ParamCounts:
    base_total: int
    adapter_total: int
    trainable_adaptation_total: int
    lora_total: int
    norm_total: int
    zero_conv_total: int
    rank: int

    @property
    def ratio(self) -> float:
        return self.adapter_total / self.base_total

    def to_dict(self) -> dict:
        return {**asdict(self), "ratio": self.ratio}


# ------------------------------------------------------------ SD 1.5 reference

def _conv(name, c_in, c_out, k=3):
    return LayerSpec(name, "other", c_in, c_out, k)


def _res_block(name, c_in, c_out, emb=1280) -> list[LayerSpec]:
    out = [LayerSpec(f"{name}.norm1", "norm", c_in, c_in), _conv(f"{name}.conv1", c_in, c_out),
           LayerSpec(f"{name}.emb_proj", "other", emb, c_out),
           LayerSpec(f"{name}.norm2", "norm", c_out, c_out), _conv(f"{name}.conv2", c_out, c_out)]
    if c_in != c_out:
        out.append(_conv(f"{name}.skip", c_in, c_out, 1))
    return out


def _transformer(name, c, context=768) -> list[LayerSpec]:
    lin = lambda n, i, o, b=True: LayerSpec(f"{name}.{n}", "lora", i, o, 1, b)  # noqa: E731
    norm = lambda n: LayerSpec(f"{name}.{n}", "norm", c, c)  # noqa: E731
    return [
        norm("norm"), lin("proj_in", c, c),  # 1x1 conv in SD 1.5, a linear map over channels
        norm("ln1"), lin("attn1.to_q", c, c, False), lin("attn1.to_k", c, c, False),
        lin("attn1.to_v", c, c, False), lin("attn1.to_out", c, c),
        norm("ln2"), lin("attn2.to_q", c, c, False), lin("attn2.to_k", context, c, False),
        lin("attn2.to_v", context, c, False), lin("attn2.to_out", c, c),
        norm("ln3"), lin("ff.proj", c, 8 * c), lin("ff.out", 4 * c, c),
        lin("proj_out", c, c),
    ]


def sd15_controlnet() -> list[LayerSpec]:
    """SD 1.5 ControlNet: encoder copy, mid block, pixel hint network, 13 zero convs."""
    layers = [LayerSpec("time_embed.0", "other", 320, 1280), LayerSpec("time_embed.2", "other", 1280, 1280)]
    hint = [(3, 16), (16, 16), (16, 32), (32, 32), (32, 96), (96, 96), (96, 256), (256, 320)]
    layers += [_conv(f"hint.{i}", a, b) for i, (a, b) in enumerate(hint)]
    layers.append(_conv("conv_in", 4, 320))
    zero_channels = [320]
    c_prev = 320
    chans = [320, 640, 1280, 1280]
    for lvl, c in enumerate(chans):
        for j in range(2):
            layers += _res_block(f"down{lvl}.res{j}", c_prev, c)
            if lvl < 3:
                layers += _transformer(f"down{lvl}.attn{j}", c)
            c_prev = c
            zero_channels.append(c)
        if lvl < 3:
            layers.append(_conv(f"down{lvl}.downsample", c, c))
            zero_channels.append(c)
    layers += _res_block("mid.res0", 1280, 1280) + _transformer("mid.attn", 1280) + _res_block("mid.res1", 1280, 1280)
    zero_channels.append(1280)
    layers += [LayerSpec(f"zero_convs.{i}", "zero_conv", c, c) for i, c in enumerate(zero_channels)]
    return layers


ARCHITECTURES = {"sd15-encoder": sd15_controlnet}


# ------------------------------------------------------------ live modules

def describe(model: nn.Module) -> list[LayerSpec]:
    """Descriptor of a live module; every parameter belongs to exactly one entry."""
    specs = []
    for name, mod in model.named_modules():
        if isinstance(mod, LoraLinear):
            specs.append(LayerSpec(key_of(name), "lora", mod.in_features, mod.out_features, 1, mod.bias is not None))
        elif isinstance(mod, ZeroConv):
            specs.append(LayerSpec(key_of(name), "zero_conv", mod.in_channels, mod.out_channels, 1))
        elif isinstance(mod, (RoutedGroupNorm, RoutedLayerNorm)):
            n = mod.weight.numel()
            specs.append(LayerSpec(key_of(name), "norm", n, n))
        elif isinstance(mod, nn.Conv2d):
            specs.append(LayerSpec(key_of(name), "other", mod.in_channels, mod.out_channels, mod.kernel_size[0],
                                   mod.bias is not None))
        elif isinstance(mod, nn.Linear):
            specs.append(LayerSpec(key_of(name), "other", mod.in_features, mod.out_features, 1, mod.bias is not None))
        elif isinstance(mod, nn.Embedding):
            specs.append(LayerSpec(key_of(name), "other", mod.num_embeddings, mod.embedding_dim, 1, False))
    return specs


def _adaptation_totals(layers: Sequence[LayerSpec], rank: int) -> tuple[int, int, int]:
    lora = sum(l.lora_count(rank) for l in layers)
    norm = sum(l.count for l in layers if l.role == "norm")
    zc = sum(l.count for l in layers if l.role == "zero_conv")
    return lora, norm, zc


def count_parameters(cn: Optional[nn.Module] = None, adapter: Optional[LoraAdapter] = None,
                     arch: Union[str, Sequence[LayerSpec], None] = None, rank: Optional[int] = None) -> ParamCounts:
    """Exact integer counts.

    ``base_total`` is every parameter of the ControlNet. ``trainable_adaptation_total``
    is what a new condition optimizes: LoRA pairs plus norm and zero-conv parameters.
    ``adapter_total`` is what the adapter stores: with a live ``adapter`` its own
    tensors, otherwise the closed form at ``rank`` assuming it carries overrides.
    """
    if isinstance(arch, str):
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
        layers = ARCHITECTURES[arch]()
    elif arch is not None:
        layers = list(arch)
    elif cn is not None:
        layers = describe(cn)
    else:
        raise ConfigError("count_parameters needs a model or an architecture descriptor")
    if rank is None:
        if adapter is None:
            raise ConfigError("rank is required when no adapter is given")
        rank = adapter.rank
    lora, norm, zc = _adaptation_totals(layers, rank)
    base = sum(l.count for l in layers)
    trainable = lora + norm + zc
    if adapter is not None:
        adapter_total = sum(p.numel() for p in adapter.parameters())
        lora = sum(p.numel() for p in adapter.lora_parameters())
    else:
        adapter_total = trainable
    return ParamCounts(base, adapter_total, trainable, lora, norm, zc, rank)


def audit_table(counts: ParamCounts) -> str:
    rows = [("base_total", counts.base_total), ("adapter_total", counts.adapter_total),
            ("trainable_adaptation_total", counts.trainable_adaptation_total), ("lora_total", counts.lora_total),
            ("norm_total", counts.norm_total), ("zero_conv_total", counts.zero_conv_total)]
    lines = [f"{k:<28}{v:>14,}  ({v / 1e6:.2f}M)" for k, v in rows]
    lines.append(f"{'adapter/base':<28}{counts.ratio:>14.4f}")
    return "\n".join(lines)
