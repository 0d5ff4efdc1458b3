"""Stage-1 multi-condition training, stage-2 adapter training, a full-parameter
baseline, and the unified checkpoint.

All per-step randomness (batch choice, timesteps, noise, label dropout) is a
pure function of ``(seed, step)``, so a run resumed from a checkpoint replays
exactly the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .autoencoder import Autoencoder, AutoencoderConfig
from .checkpoint import load_tensors, prefixed, read_header, save_tensors, section
from .conditions import batch_at, to_tensor
from .controlnet import BaseControlNet, ControlledDenoiser, attach_lora, switch_adapter
from .diffusion import DiffusionBatch, NoiseSchedule, diffusion_loss, sample_timesteps
from .digests import tensor_digest, topology_digest
from .errors import CompatibilityError, ConfigError, FrozenViolationError, InvalidRangeError
from .lora import LoraAdapter, check_adapter_fits
from .unet import UNet, UNetConfig, drop_labels

logger = logging.getLogger(__name__)

STAGES = ("base", "adapt", "full")


@dataclass
class TrainConfig:
    stage: str = "base"
    learning_rate: float = 1e-4
    batch_size: int = 32
    total_steps: int = 8000
    cfg_null_prob: float = 0.1
    lora_rank: int = 16
    lora_alpha: Optional[float] = None
    seed: int = 0
    eval_every: int = 250
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not self.learning_rate > 0:
            raise InvalidRangeError("learning_rate must be > 0")
        if not 0 <= self.cfg_null_prob < 1:
            raise InvalidRangeError("cfg_null_prob must be in [0, 1)")
        if self.batch_size < 1 or self.total_steps < 0 or self.lora_rank < 1:
            raise InvalidRangeError("batch_size and lora_rank must be >= 1, total_steps >= 0")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainSubset:
    """One condition kind's training tensors: target latents, condition inputs, labels."""

    kind: str
    x0: torch.Tensor
    cond: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return len(self.x0)


def prepare_subset(kind: str, images: np.ndarray, conditions: np.ndarray, labels: np.ndarray, ae: Autoencoder,
                   embedding: str = "vae") -> TrainSubset:
    """Encode targets once with the frozen autoencoder; conditions are embedded
    the same way (``vae``) or kept as pixels for a conv hint network (``conv``)."""
    with torch.no_grad():
        x0 = _encode_all(ae, to_tensor(images))
        cond = _encode_all(ae, to_tensor(conditions)) if embedding == "vae" else to_tensor(conditions)
    return TrainSubset(kind, x0.contiguous(), cond.contiguous(), torch.as_tensor(labels, dtype=torch.long))


def _encode_all(ae: Autoencoder, x: torch.Tensor) -> torch.Tensor:
    return torch.cat([ae.encode(x[i:i + 256]) for i in range(0, len(x), 256)])


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay, eps=1e-8)


def step_generator(seed: int, step: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), int(step), 0x5EED]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


class Trainer:
    """Owns the optimizer, the step counter and the metrics log for one run.

    ``mode`` selects the trainable set:

    * ``base``  - ControlNet θ plus the LoRA pairs of whichever adapter is active
    * ``adapt`` - only the given adapter (LoRA pairs and its overrides)
    * ``full``  - all of θ, no adapter
    """

    def __init__(self, mode: str, unet: UNet, cn: BaseControlNet, subsets: Sequence[TrainSubset],
                 sched: NoiseSchedule, cfg: TrainConfig, adapters: Sequence[LoraAdapter] = (),
                 ae: Optional[Autoencoder] = None, track_grads: bool = False):
        if mode not in STAGES:
            raise ConfigError(f"unknown training mode {mode!r}")
        self.mode, self.unet, self.cn, self.ae = mode, unet, cn, ae
        self.subsets, self.sched, self.cfg = list(subsets), sched, cfg
        self.adapters = list(adapters)
        if mode == "base" and len(self.adapters) != len(self.subsets):
            raise ConfigError("stage-1 training needs one adapter per subset")
        if mode == "adapt" and len(self.adapters) != 1:
            raise ConfigError("adapter training takes exactly one adapter")
        for ad in self.adapters:
            check_adapter_fits(cn, ad)
        self.model = ControlledDenoiser(unet, cn)
        self.named_trainable = self._select_trainable()
        self.optimizer = make_optimizer([p for _, p in self.named_trainable], cfg)
        self.step = 0
        self.log: list[dict] = []
        self.snapshots: list[tuple[int, float]] = []
        self.updates_per_kind = [0] * len(self.subsets)
        self.track_grads = track_grads
        self.touched: set[str] = set()
        self._sizes = [len(s) for s in self.subsets]
        if mode == "adapt":
            switch_adapter(cn, self.adapters[0])
        elif mode == "full":
            switch_adapter(cn, None)

    # ----------------------------------------------------------- setup
    def _select_trainable(self) -> list[tuple[str, torch.nn.Parameter]]:
        for p in self.unet.parameters():
            p.requires_grad_(False)
        if self.ae is not None:
            for p in self.ae.parameters():
                p.requires_grad_(False)
        theta_trainable = self.mode in ("base", "full")
        for p in self.cn.parameters():
            p.requires_grad_(theta_trainable)
        named = [(f"controlnet/{n}", p) for n, p in self.cn.named_parameters()] if theta_trainable else []
        for ad in self.adapters:
            lora_ids = {id(p) for p in ad.lora_parameters()}
            for n, p in ad.named_parameters():
                train = self.mode == "adapt" or id(p) in lora_ids
                p.requires_grad_(train)
                if train:
                    named.append((f"adapter/{ad.condition_kind}/{n}", p))
        return named

    def trainable_names(self) -> set[str]:
        return {n for n, _ in self.named_trainable}

    def frozen_digests(self) -> dict[str, str]:
        d = {"unet": tensor_digest(self.unet)}
        if self.ae is not None:
            d["autoencoder"] = tensor_digest(self.ae)
        if self.mode == "adapt":
            d["controlnet"] = tensor_digest(self.cn)
        return d

    # ----------------------------------------------------------- stepping
    def make_batch(self, step: int) -> tuple[int, DiffusionBatch]:
        plan = batch_at(step, self._sizes, self.cfg.batch_size, self.cfg.seed)
        sub = self.subsets[plan.kind_index]
        gen = step_generator(self.cfg.seed, step)
        idx = torch.from_numpy(plan.indices)
        x0 = sub.x0[idx]
        labels = drop_labels(sub.labels[idx], self.cfg.cfg_null_prob, self.unet.cfg.null_class, gen)
        t = sample_timesteps(len(x0), self.sched.T, gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        return plan.kind_index, DiffusionBatch(x0, sub.cond[idx], plan.kind_index, labels, t, eps)

    def train_step(self) -> float:
        k, batch = self.make_batch(self.step)
        if self.mode == "base":
            switch_adapter(self.cn, self.adapters[k])
        loss = diffusion_loss(self.model, batch, self.sched)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.track_grads:
            self.touched.update(n for n, p in self.named_trainable if p.grad is not None and bool(p.grad.abs().sum() > 0))
        params = [p for _, p in self.named_trainable if p.grad is not None]
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
        self.optimizer.step()
        self.updates_per_kind[k] += 1
        rec = {"step": self.step, "kind": self.subsets[k].kind, "loss": loss.item(),
               "lr": self.optimizer.param_groups[0]["lr"], "wallclock": time.time()}
        self.log.append(rec)
        self.step += 1
        return rec["loss"]

    def run(self, total_steps: Optional[int] = None, eval_fn: Optional[Callable[[int], float]] = None,
            gate: Optional[float] = None, higher_is_better: bool = True, stop_at_gate: bool = False,
            log_path=None) -> "Trainer":
        """Train until ``total_steps``; evaluate at step 0 and every ``eval_every`` steps."""
        total = self.cfg.total_steps if total_steps is None else total_steps
        before = self.frozen_digests()
        log_f = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while True:
                if eval_fn is not None and self.step % self.cfg.eval_every == 0 and \
                        (not self.snapshots or self.snapshots[-1][0] != self.step):
                    value = float(eval_fn(self.step))
                    self.snapshots.append((self.step, value))
                    logger.info("%s step %d fidelity %.4f", self.mode, self.step, value)
                    if stop_at_gate and gate is not None and (value >= gate if higher_is_better else value <= gate):
                        break
                if self.step >= total:
                    break
                self.train_step()
                if log_f:
                    log_f.write(json.dumps(self.log[-1]) + "\n")
                if self.step % 500 == 0:
                    recent = [r["loss"] for r in self.log[-500:]]
                    logger.info("%s step %d loss %.4f", self.mode, self.step, float(np.mean(recent)))
        finally:
            if log_f:
                log_f.close()
            self.cn.eval()
        after = self.frozen_digests()
        changed = [k for k in before if before[k] != after[k]]
        if changed:
            raise FrozenViolationError(f"frozen tensors changed during training: {changed}")
        return self

    # ----------------------------------------------------------- optimizer state
    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in self.named_trainable:
            for key, val in self.optimizer.state.get(p, {}).items():
                out[f"{name}/{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
        return out

    def load_optimizer_tensors(self, tensors: dict[str, torch.Tensor], step: int) -> None:
        by_name = dict(self.named_trainable)
        state: dict = {}
        for full, val in tensors.items():
            name, key = full.rsplit("/", 1)
            if name not in by_name:
                raise CompatibilityError(f"optimizer state for unknown parameter {name}")
            state.setdefault(by_name[name], {})[key] = val.clone()
        self.optimizer.state.clear()
        for p, st in state.items():
            self.optimizer.state[p] = st
        self.step = int(step)


def _fresh(adapters: Sequence[LoraAdapter]) -> bool:
    return all(bool((b == 0).all()) for ad in adapters for b in ad.lora_B.values())


def train_base(cn: BaseControlNet, adapters: Sequence[LoraAdapter], unet: UNet, ae: Optional[Autoencoder],
               subsets: Sequence[TrainSubset], sched: NoiseSchedule, cfg: TrainConfig, **run_kwargs) -> Trainer:
    """Stage 1: adapter ``step mod K`` is switched on for each batch; θ and that adapter's LoRA learn."""
    if cfg.stage != "base":
        raise ConfigError("train_base requires cfg.stage == 'base'")
    if len(subsets) < 2:
        raise ConfigError("stage-1 training needs K >= 2 condition subsets")
    if not _fresh(adapters):
        raise ConfigError("stage-1 adapters must be freshly attached (B = 0)")
    trainer = Trainer("base", unet, cn, subsets, sched, cfg, adapters, ae, run_kwargs.pop("track_grads", False))
    return trainer.run(**run_kwargs)


def train_new_lora(cn: BaseControlNet, adapter: LoraAdapter, unet: UNet, ae: Optional[Autoencoder],
                   subset: TrainSubset, sched: NoiseSchedule, cfg: TrainConfig, **run_kwargs) -> Trainer:
    """Stage 2: θ frozen; only the new adapter's LoRA pairs, norm and zero-conv overrides learn."""
    if cfg.stage != "adapt":
        raise ConfigError("train_new_lora requires cfg.stage == 'adapt'")
    trainer = Trainer("adapt", unet, cn, [subset], sched, cfg, [adapter], ae, run_kwargs.pop("track_grads", False))
    return trainer.run(**run_kwargs)


def train_controlnet(cn: BaseControlNet, unet: UNet, ae: Optional[Autoencoder], subset: TrainSubset,
                     sched: NoiseSchedule, cfg: TrainConfig, **run_kwargs) -> Trainer:
    """Full-parameter single-condition ControlNet training (the non-adapter baseline)."""
    trainer = Trainer("full", unet, cn, [subset], sched, cfg, (), ae, run_kwargs.pop("track_grads", False))
    return trainer.run(**run_kwargs)


# ================================================================ checkpoint

@dataclass
class PipelineState:
    sched: NoiseSchedule
    ae: Autoencoder
    unet: UNet
    cn: Optional[BaseControlNet] = None
    adapters: dict = field(default_factory=dict)
    stage: str = "pretrain"
    step: int = 0
    optimizer: dict = field(default_factory=dict)
    train_config: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def _module_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in module.state_dict().items()}


def save_checkpoint(state: PipelineState, path) -> None:
    tensors = {}
    tensors.update(prefixed("autoencoder", _module_tensors(state.ae)))
    tensors.update(prefixed("unet", _module_tensors(state.unet)))
    meta = {
        "stage": state.stage,
        "step": int(state.step),
        "schedule": state.sched.to_dict(),
        "autoencoder": {"config": asdict(state.ae.config), "latent_scale": float(state.ae.latent_scale)},
        "unet_config": state.unet.cfg.to_dict(),
        "controlnet": None,
        "adapters": {},
        "digests": {"autoencoder": tensor_digest(state.ae), "unet": tensor_digest(state.unet)},
        "train_config": state.train_config,
        "extra": state.extra,
    }
    if state.cn is not None:
        tensors.update(prefixed("controlnet", _module_tensors(state.cn)))
        meta["controlnet"] = {"embedding": state.cn.embedding,
                              "downsample_factor": state.ae.config.downsample_factor}
        meta["digests"]["controlnet"] = tensor_digest(state.cn)
        meta["digests"]["controlnet_topology"] = topology_digest(state.cn)
    for kind, ad in sorted(state.adapters.items()):
        tensors.update(prefixed(f"adapter/{kind}", _module_tensors(ad)))
        meta["adapters"][kind] = ad.header()
    tensors.update(prefixed("optimizer", state.optimizer))
    save_tensors(path, tensors, meta)


def _adapter_from(header: dict, tensors: dict[str, torch.Tensor]) -> LoraAdapter:
    ad = LoraAdapter(header["condition_kind"], header["rank"], header["alpha"], header["base_topology_digest"])
    for full, t in tensors.items():
        group, key = full.split(".", 1)
        getattr(ad, group)[key] = torch.nn.Parameter(t)
    return ad


def load_checkpoint(path, sections: Optional[Sequence[str]] = None) -> PipelineState:
    tensors, meta = load_tensors(path)
    ae = Autoencoder(AutoencoderConfig(**meta["autoencoder"]["config"]))
    ae.load_state_dict(section(tensors, "autoencoder"))
    unet = UNet(UNetConfig(**meta["unet_config"]))
    unet.load_state_dict(section(tensors, "unet"))
    for m in (ae, unet):
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
    for name, mod in (("autoencoder", ae), ("unet", unet)):
        if tensor_digest(mod) != meta["digests"][name]:
            raise CompatibilityError(f"{path}: {name} digest mismatch")
    cn = None
    if meta["controlnet"] is not None:
        from .controlnet import BaseControlNet

        cn = BaseControlNet(unet, meta["controlnet"]["embedding"], meta["controlnet"]["downsample_factor"])
        cn.load_state_dict(section(tensors, "controlnet"))
        if tensor_digest(cn) != meta["digests"]["controlnet"]:
            raise CompatibilityError(f"{path}: controlnet digest mismatch")
        cn.eval()
    adapters = {}
    for kind, header in meta["adapters"].items():
        ad = _adapter_from(header, section(tensors, f"adapter/{kind}"))
        if cn is not None and header["base_topology_digest"] != topology_digest(cn):
            raise CompatibilityError(f"{path}: adapter {kind} does not match the stored ControlNet")
        adapters[kind] = ad
    return PipelineState(NoiseSchedule.from_dict(meta["schedule"]), ae, unet, cn, adapters, meta["stage"],
                         meta["step"], section(tensors, "optimizer"), meta["train_config"], meta.get("extra", {}))


def save_adapter(adapter: LoraAdapter, path) -> None:
    """Standalone adapter archive; header carries kind, rank, alpha and base topology digest."""
    save_tensors(path, prefixed("adapter", _module_tensors(adapter)), {"adapter": adapter.header()})


def load_adapter(path, cn: Optional[BaseControlNet] = None) -> LoraAdapter:
    """Load an adapter file; with ``cn`` given, reject it unless the topology digests match."""
    header = read_header(path)["meta"]["adapter"]
    if cn is not None and header["base_topology_digest"] != topology_digest(cn):
        raise CompatibilityError(f"{path}: adapter base topology digest does not match this ControlNet")
    tensors, _ = load_tensors(path)
    ad = _adapter_from(header, section(tensors, "adapter"))
    if cn is not None:
        check_adapter_fits(cn, ad)
    return ad


def new_stage1_adapters(cn: BaseControlNet, kinds: Sequence[str], rank: int, seed: int,
                        alpha: Optional[float] = None) -> list[LoraAdapter]:
    return [attach_lora(cn, rank, k, seed + i, alpha, overrides=False) for i, k in enumerate(kinds)]
