"""Desk-scale experiment pipeline with on-disk caching.

Stages: procedural data, autoencoder, class-conditional UNet, stage-1 base
training on the base kinds, then three comparisons:

* adaptation of a new adapter to a held-out kind vs a from-scratch ControlNet
* autoencoder vs random-conv condition embedding
* restoration outputs vs unconditional samples

Every cached artifact is keyed by a hash of the config fields it depends on,
so a rerun with the same config reloads instead of retraining.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .autoencoder import Autoencoder, AutoencoderConfig, AutoencoderTrainConfig, pretrain_autoencoder
from .checkpoint import load_tensors, save_tensors
from .conditions import (conditions_for, generate_images, load_params, params_digest, record_params, to_tensor,
                         to_uint8)
from .controlnet import BaseControlNet, ControlledDenoiser, attach_lora, init_base_controlnet, switch_adapter
from .diffusion import NoiseSchedule, ddim_sample, make_linear_schedule
from .metrics import analyze_convergence, first_step_meeting, ground_truth_fidelity, score_kind
from .training import (TrainConfig, TrainSubset, load_adapter, new_stage1_adapters, prepare_subset, save_adapter,
                       train_base, train_controlnet, train_new_lora)
from .unet import UNet, UNetConfig, UNetTrainConfig, pretrain_unet

logger = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    cache_dir: str = "runs/cache"
    seed: int = 0
    per_kind: int = 5000
    adapt_pairs: int = 1000
    val_size: int = 64
    ae_images: int = 10000
    ae_condition_fraction: float = 0.25
    autoencoder: dict = field(default_factory=dict)
    ae_train: dict = field(default_factory=dict)
    unet: dict = field(default_factory=lambda: {"attention_levels": [0, 1]})
    unet_train: dict = field(default_factory=dict)
    base_kinds: tuple = ("edge", "palette", "pixelate")
    heldout_kind: str = "mask_inpaint"
    ablation_kind: str = "edge"
    rank: int = 16
    batch_size: int = 32
    learning_rate: float = 1e-3
    stage1_steps: int = 8000
    adapt_max_steps: int = 6000
    scratch_max_steps: int = 6000
    scratch_embedding: str = "conv"
    ablation_steps: int = 6000
    eval_every: int = 250
    ddim_steps: int = 50
    eval_seed: int = 1234

    def __post_init__(self):
        self.base_kinds = tuple(self.base_kinds)

    @property
    def pool_size(self) -> int:
        return len(self.base_kinds) * self.per_kind + self.adapt_pairs + self.val_size

    def key(self, *names: str) -> str:
        d = asdict(self)
        blob = json.dumps({n: d[n] for n in sorted(names)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def mixed_corpus(images: np.ndarray, render: dict, fraction: float, seed: int) -> np.ndarray:
    """Shape images plus condition renderings, shuffled.

    The last ``fraction`` of ``images`` is replaced, round-robin over kinds, by
    ``render[kind](ids)``. Thin edge maps look nothing like filled shapes;
    without them in the corpus the frozen encoder cannot embed edge
    conditions faithfully.
    """
    n = len(images)
    n_cond = int(n * fraction)
    parts = [images[: n - n_cond]]
    ids = np.arange(n - n_cond, n)
    kinds = list(render)
    for j, kind in enumerate(kinds):
        parts.append(render[kind](ids[j::len(kinds)]))
    corpus = np.concatenate(parts)
    return corpus[np.random.default_rng([seed, 17]).permutation(len(corpus))]


_AE_FIELDS = ("seed", "ae_images", "ae_condition_fraction", "autoencoder", "ae_train", "per_kind", "adapt_pairs",
              "val_size", "base_kinds")


def _gate(kind: str) -> float:
    return float(load_params()["kinds"][kind]["gate"])


class Pipeline:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.sched: NoiseSchedule = make_linear_schedule()
        self._pool = None
        self._ae: Optional[Autoencoder] = None
        self._unet: Optional[UNet] = None

    # ------------------------------------------------------------ data
    @property
    def pool(self):
        if self._pool is None:
            self._pool = generate_images(self.cfg.pool_size, self.cfg.seed)
        return self._pool

    def ids(self, part: str) -> np.ndarray:
        c = self.cfg
        n_base = len(c.base_kinds) * c.per_kind
        if part.startswith("base:"):
            k = int(part[5:])
            return np.arange(k * c.per_kind, (k + 1) * c.per_kind)
        if part == "adapt":
            return np.arange(n_base, n_base + c.adapt_pairs)
        if part == "val":
            return np.arange(n_base + c.adapt_pairs, n_base + c.adapt_pairs + c.val_size)
        raise KeyError(part)

    def arrays(self, part: str, kind: str):
        images, labels = self.pool
        ids = self.ids(part)
        return images[ids], conditions_for(images[ids], kind, self.cfg.seed, ids), labels[ids], ids

    def subset(self, part: str, kind: str, embedding: str = "vae") -> TrainSubset:
        imgs, conds, labels, _ = self.arrays(part, kind)
        return prepare_subset(kind, imgs, conds, labels, self.ae, embedding)

    # ------------------------------------------------------------ pretrained stack
    def autoencoder_corpus(self) -> np.ndarray:
        c = self.cfg
        images, _ = self.pool
        n = min(c.ae_images, len(c.base_kinds) * c.per_kind)
        return mixed_corpus(images[:n], {k: (lambda sel, k=k: conditions_for(images[sel], k, c.seed, sel))
                                         for k in c.base_kinds}, c.ae_condition_fraction, c.seed)

    @property
    def ae(self) -> Autoencoder:
        if self._ae is None:
            key = self.cfg.key(*_AE_FIELDS)
            path = self.root / f"autoencoder-{key}.ckpt"
            if path.exists():
                tensors, meta = load_tensors(path)
                ae = Autoencoder(AutoencoderConfig(**meta["config"]))
                ae.load_state_dict(tensors)
            else:
                ae = pretrain_autoencoder(to_tensor(self.autoencoder_corpus()),
                                          AutoencoderConfig(**self.cfg.autoencoder),
                                          AutoencoderTrainConfig(seed=self.cfg.seed, **self.cfg.ae_train))
                save_tensors(path, ae.state_dict(), {"config": asdict(ae.config)})
            ae.eval()
            for p in ae.parameters():
                p.requires_grad_(False)
            self._ae = ae
        return self._ae

    @property
    def unet(self) -> UNet:
        if self._unet is None:
            key = self.cfg.key(*_AE_FIELDS, "per_kind", "base_kinds", "unet",
                               "unet_train", "adapt_pairs", "val_size")
            path = self.root / f"unet-{key}.ckpt"
            cfg = UNetConfig(**self.cfg.unet)
            unet = UNet(cfg)
            if path.exists():
                tensors, _ = load_tensors(path)
                unet.load_state_dict(tensors)
            else:
                images, labels = self.pool
                n = len(self.cfg.base_kinds) * self.cfg.per_kind
                with torch.no_grad():
                    lat = torch.cat([self.ae.encode(to_tensor(images[i:min(n, i + 512)])) for i in range(0, n, 512)])
                unet = pretrain_unet(lat, torch.as_tensor(labels[:n], dtype=torch.long), self.sched, cfg,
                                     UNetTrainConfig(seed=self.cfg.seed, **self.cfg.unet_train))
                save_tensors(path, unet.state_dict(), {"config": cfg.to_dict()})
            unet.eval()
            for p in unet.parameters():
                p.requires_grad_(False)
            self._unet = unet
        return self._unet

    def train_config(self, stage: str, steps: int) -> TrainConfig:
        c = self.cfg
        return TrainConfig(stage=stage, learning_rate=c.learning_rate, batch_size=c.batch_size, total_steps=steps,
                           lora_rank=c.rank, seed=c.seed, eval_every=c.eval_every)

    # ------------------------------------------------------------ stage 1
    def stage1_key(self) -> str:
        return self.cfg.key(*_AE_FIELDS, "per_kind", "base_kinds", "unet",
                            "unet_train", "rank", "batch_size", "learning_rate", "stage1_steps", "adapt_pairs",
                            "val_size")

    def stage1(self) -> tuple[BaseControlNet, dict, dict]:
        """Base ControlNet, its stage-1 adapters and a loss summary."""
        key = self.stage1_key()
        base_path = self.root / f"stage1-{key}.ckpt"
        summary_path = self.root / f"stage1-{key}.json"
        cn = init_base_controlnet(self.unet, "vae", self.ae.config.downsample_factor)
        if base_path.exists():
            tensors, _ = load_tensors(base_path)
            cn.load_state_dict(tensors)
            adapters = {k: load_adapter(self.root / f"stage1-{key}-{k}.adapter", cn) for k in self.cfg.base_kinds}
            return cn, adapters, json.loads(summary_path.read_text())
        subsets = [self.subset(f"base:{i}", k) for i, k in enumerate(self.cfg.base_kinds)]
        ads = new_stage1_adapters(cn, self.cfg.base_kinds, self.cfg.rank, self.cfg.seed)
        t0 = time.time()
        tr = train_base(cn, ads, self.unet, self.ae, subsets, self.sched,
                        self.train_config("base", self.cfg.stage1_steps))
        losses = [r["loss"] for r in tr.log]
        w = min(500, len(losses) // 2)
        summary = {"steps": tr.step, "updates_per_kind": tr.updates_per_kind,
                   "first_mean": float(np.mean(losses[:w])), "last_mean": float(np.mean(losses[-w:])),
                   "seconds": time.time() - t0}
        switch_adapter(cn, None)
        save_tensors(base_path, cn.state_dict(), {"summary": summary})
        for ad in ads:
            save_adapter(ad, self.root / f"stage1-{key}-{ad.condition_kind}.adapter")
        summary_path.write_text(json.dumps(summary, indent=2))
        return cn, {ad.condition_kind: ad for ad in ads}, summary

    # ------------------------------------------------------------ evaluation
    def sample(self, denoiser: ControlledDenoiser, cond: Optional[torch.Tensor], n: int, seed: int) -> np.ndarray:
        """Prompt-free (null class) deterministic DDIM samples as uint8 images."""
        lat = self.ae.config.latent_size
        null = torch.full((n,), self.unet.cfg.null_class, dtype=torch.long)

        def predict(x, t):
            return denoiser(x, torch.full((n,), t, dtype=torch.long), null, cond)

        with torch.no_grad():
            z = ddim_sample(predict, self.sched, self.cfg.ddim_steps, 1.0, seed,
                            (n, self.ae.config.latent_channels, lat, lat))
            return to_uint8(self.ae.decode(z))

    def evaluator(self, denoiser: ControlledDenoiser, kind: str, embedding: str = "vae"):
        images, conds, _, ids = self.arrays("val", kind)
        cond_t = prepare_subset(kind, images, conds, np.zeros(len(ids)), self.ae, embedding).cond
        params = [record_params(kind, self.cfg.seed, int(i), images.shape[1]) for i in ids]

        def evaluate(step: int) -> float:
            gen = self.sample(denoiser, cond_t, len(ids), self.cfg.eval_seed)
            return score_kind(gen, conds, images, kind, params).aggregate

        return evaluate

    # ------------------------------------------------------------ comparisons
    def adaptation_vs_scratch(self) -> dict:
        c = self.cfg
        kind, gate = c.heldout_kind, _gate(c.heldout_kind)
        hib = _higher_is_better(kind)
        cn, _, s1 = self.stage1()
        sub = self.subset("adapt", kind)
        adapter = attach_lora(cn, c.rank, kind, c.seed + 100)
        tr_a = train_new_lora(cn, adapter, self.unet, self.ae, sub, self.sched,
                              self.train_config("adapt", c.adapt_max_steps),
                              eval_fn=self.evaluator(ControlledDenoiser(self.unet, cn), kind),
                              gate=gate, higher_is_better=hib, stop_at_gate=True)
        switch_adapter(cn, adapter)
        restoration = self.restoration_vs_unconditional(ControlledDenoiser(self.unet, cn), kind)
        switch_adapter(cn, None)

        scratch = init_base_controlnet(self.unet, c.scratch_embedding, self.ae.config.downsample_factor)
        torch.manual_seed(c.seed)
        sub_s = self.subset("adapt", kind, c.scratch_embedding)
        tr_s = train_controlnet(scratch, self.unet, self.ae, sub_s, self.sched,
                                self.train_config("full", c.scratch_max_steps),
                                eval_fn=self.evaluator(ControlledDenoiser(self.unet, scratch), kind,
                                                       c.scratch_embedding),
                                gate=gate, higher_is_better=hib, stop_at_gate=True)
        steps_a = first_step_meeting(tr_a.snapshots, gate, hib)
        steps_s = first_step_meeting(tr_s.snapshots, gate, hib)
        if steps_a is None:
            ratio, bound = None, False
        elif steps_s is None:
            # scratch never met the gate: its true step count exceeds the budget
            ratio, bound = steps_a / (c.scratch_max_steps + c.eval_every), True
        else:
            ratio, bound = steps_a / max(steps_s, 1), False
        return {"kind": kind, "gate": gate, "stage1": s1,
                "adapt": {"snapshots": tr_a.snapshots, "steps_to_gate": steps_a},
                "scratch": {"snapshots": tr_s.snapshots, "steps_to_gate": steps_s, "embedding": c.scratch_embedding},
                "ratio": ratio, "ratio_is_upper_bound": bound, "restoration": restoration}

    def restoration_vs_unconditional(self, denoiser: ControlledDenoiser, kind: str) -> dict:
        images, conds, _, ids = self.arrays("val", kind)
        cond_t = prepare_subset(kind, images, conds, np.zeros(len(ids)), self.ae).cond
        gen = self.sample(denoiser, cond_t, len(ids), self.cfg.eval_seed)
        unc = self.sample(ControlledDenoiser(self.unet, None), None, len(ids), self.cfg.eval_seed)
        a = ground_truth_fidelity(gen, images, kind).aggregate
        b = ground_truth_fidelity(unc, images, kind).aggregate
        return {"trained_psnr": a, "unconditional_psnr": b, "margin_db": a - b}

    def embedding_ablation(self) -> dict:
        c = self.cfg
        kind, gate = c.ablation_kind, _gate(c.ablation_kind)
        hib = _higher_is_better(kind)
        out = {"kind": kind, "gate": gate}
        for emb in ("vae", "conv"):
            key = c.key(*_AE_FIELDS, "per_kind", "base_kinds", "unet",
                        "unet_train", "ablation_kind", "ablation_steps", "batch_size", "learning_rate", "eval_every",
                        "ddim_steps", "eval_seed", "adapt_pairs", "val_size")
            path = self.root / f"ablation-{key}-{params_digest()[:8]}-{emb}.json"
            if path.exists():
                out[emb] = json.loads(path.read_text())
                continue
            cn = init_base_controlnet(self.unet, emb, self.ae.config.downsample_factor)
            sub = self.subset("adapt", kind, emb)
            tr = train_controlnet(cn, self.unet, self.ae, sub, self.sched,
                                  self.train_config("full", c.ablation_steps),
                                  eval_fn=self.evaluator(ControlledDenoiser(self.unet, cn), kind, emb))
            series = analyze_convergence(tr.snapshots, gate, hib, tr.log)
            out[emb] = series.to_dict()
            path.write_text(json.dumps(out[emb], indent=2))
        return out

    def cached_json(self, name: str, fn) -> dict:
        key = self.cfg.key(*asdict(self.cfg).keys() - {"cache_dir"}) + "-" + params_digest()[:8]
        path = self.root / f"{name}-{key}.json"
        if path.exists():
            return json.loads(path.read_text())
        result = fn()
        path.write_text(json.dumps(result, indent=2))
        return result


def _higher_is_better(kind: str) -> bool:
    return load_params()["kinds"][kind]["metric"] != "cycle_mse"
