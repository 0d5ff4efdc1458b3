"""``ctrlora`` command line: one entry point, one subcommand per pipeline stage.

Every run writes into ``runs/<name>/`` (``config/``, ``checkpoints/``,
``samples/``, ``reports/``, ``logs/``). Options come from flags, then a YAML
``--config`` file, then built-in defaults; the merged result is recorded in
``config/<command>.yaml`` next to the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image, ImageDraw

from .autoencoder import AutoencoderConfig, AutoencoderTrainConfig, pretrain_autoencoder
from .conditions import (ConditionDataset, build_dataset, condition_kind, generate_images, load_params, to_tensor,
                         to_uint8)
from .controlnet import ControlledDenoiser, active, attach_lora, init_base_controlnet, switch_adapter
from .diffusion import ddim_sample, make_linear_schedule
from .errors import ConfigError, CtrLoraError, DataError
from .experiments import mixed_corpus
from .metrics import analyze_convergence, score_kind
from .params import audit_table, count_parameters
from .training import (PipelineState, TrainConfig, Trainer, load_adapter, load_checkpoint, new_stage1_adapters,
                       prepare_subset, save_adapter, save_checkpoint)
from .unet import UNetConfig, UNetTrainConfig, pretrain_unet

logger = logging.getLogger("ctrlora")

SEED_ENV = "CTRLORA_SEED"


# ---------------------------------------------------------------- run plumbing

class Run:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.dir = Path(args.runs_dir) / args.name
        for sub in ("config", "checkpoints", "samples", "reports", "logs"):
            (self.dir / sub).mkdir(parents=True, exist_ok=True)

    def path(self, sub: str, name: str) -> Path:
        return self.dir / sub / name

    @property
    def data_root(self) -> Path:
        return Path(self.args.data_root) if self.args.data_root else self.dir / "data"

    def record_config(self) -> dict:
        cfg = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func", "config")}
        with open(self.path("config", f"{self.args.command}.yaml"), "w", encoding="utf-8") as f:
            yaml.safe_dump(cfg, f, sort_keys=True)
        return cfg

    def attach_log(self):
        handler = logging.FileHandler(self.path("logs", f"{self.args.command}.log"), encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
        logging.getLogger("ctrlora").addHandler(handler)


def _resolve_seed(value: Optional[int]) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v != ""]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [v for v in str(text).split(",") if v]


def _load_kind(run: Run, kind: str, split: str):
    condition_kind(kind)
    return ConditionDataset.load(run.data_root, kind).load_arrays(split)


def _save_grid(rows: Sequence[np.ndarray], path: Path) -> None:
    """Rows of uint8 (N, H, W, 3) image sets as one PNG, 2-pixel gutters."""
    n, h, w = rows[0].shape[:3]
    g = 2
    grid = np.full((len(rows) * (h + g) + g, n * (w + g) + g, 3), 255, dtype=np.uint8)
    for r, imgs in enumerate(rows):
        for c, img in enumerate(imgs):
            y, x = g + r * (h + g), g + c * (w + g)
            grid[y:y + h, x:x + w] = img
    Image.fromarray(grid).save(path, format="PNG")


def _pretrained(run: Run) -> PipelineState:
    path = Path(run.args.pretrained) if run.args.pretrained else run.path("checkpoints", "pretrain.ckpt")
    return load_checkpoint(path)


def _base(run: Run) -> PipelineState:
    path = Path(run.args.base) if run.args.base else run.path("checkpoints", "base.ckpt")
    state = load_checkpoint(path)
    if state.cn is None:
        raise DataError(f"{path} holds no ControlNet; run train-base first")
    return state


def _adapter_path(run: Run, kind_or_path: str) -> Path:
    p = Path(kind_or_path)
    return p if p.suffix == ".adapter" else run.path("checkpoints", f"{kind_or_path}.adapter")


def _embedding(state: PipelineState) -> str:
    return state.cn.embedding if state.cn is not None else "vae"


def _cond_inputs(state: PipelineState, images, conds, labels) -> torch.Tensor:
    return prepare_subset("x", images, conds, labels, state.ae, _embedding(state)).cond


def _sampler(state: PipelineState, n: int, class_label: Optional[int], guidance: float, steps: int, seed: int,
             predict_eps):
    """DDIM over ``predict_eps(x, t, labels)``; the unconditional branch uses the null label."""
    null = torch.full((n,), state.unet.cfg.null_class, dtype=torch.long)
    labels = null if class_label is None else torch.full((n,), int(class_label), dtype=torch.long)
    lat = state.ae.config.latent_size

    def predict(x, t):
        return predict_eps(x, torch.full((n,), t, dtype=torch.long), labels)

    def predict_uncond(x, t):
        return predict_eps(x, torch.full((n,), t, dtype=torch.long), null)

    with torch.no_grad():
        z = ddim_sample(predict, state.sched, steps, guidance, seed, (n, state.ae.config.latent_channels, lat, lat),
                        predict_uncond=predict_uncond)
        return to_uint8(state.ae.decode(z))


def _class_label(value) -> Optional[int]:
    if value is None or str(value).lower() in ("null", "none", ""):
        return None
    return int(value)


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run) -> int:
    a = run.args
    kinds = _str_list(a.kinds)
    images, labels = generate_images(a.n, a.seed)
    build_dataset(images, labels, kinds, run.data_root, split_seed=a.split_seed, val_fraction=a.val_fraction,
                  image_seed=a.seed)
    print(json.dumps({"data_root": str(run.data_root), "kinds": kinds, "n": a.n}))
    return 0


def cmd_pretrain(run: Run) -> int:
    a = run.args
    kinds = _str_list(a.corpus_kinds)
    images, conds, labels, recs = _load_kind(run, kinds[0], "train")
    ids = np.arange(len(images))
    cond_sets = {kinds[0]: conds}
    for kind in kinds[1:]:
        cond_sets[kind] = _load_kind(run, kind, "train")[1]
    corpus = mixed_corpus(images, {k: (lambda sel, k=k: cond_sets[k][sel]) for k in kinds}, a.ae_condition_fraction,
                          a.seed) if kinds else images
    ae = pretrain_autoencoder(to_tensor(corpus), AutoencoderConfig(hidden_channels=a.ae_hidden),
                              AutoencoderTrainConfig(steps=a.ae_steps, batch_size=a.ae_batch_size, min_psnr=a.ae_min_psnr,
                                                     seed=a.seed))
    sched = make_linear_schedule()
    with torch.no_grad():
        lat = torch.cat([ae.encode(to_tensor(images[i:i + 512])) for i in range(0, len(ids), 512)])
    ucfg = UNetConfig(base_channels=a.base_channels, channel_multipliers=_int_list(a.channel_multipliers),
                      attention_levels=_int_list(a.attention_levels), num_classes=load_params()["num_classes"],
                      time_embed_dim=4 * a.base_channels)
    unet = pretrain_unet(lat, torch.as_tensor(labels), sched, ucfg,
                         UNetTrainConfig(steps=a.unet_steps, batch_size=a.unet_batch_size, loss_gate=a.unet_loss_gate,
                                         seed=a.seed))
    save_checkpoint(PipelineState(sched, ae, unet, stage="pretrain", extra={"config": run.record_config()}),
                    run.path("checkpoints", "pretrain.ckpt"))
    return 0


def _train_config(a, stage: str) -> TrainConfig:
    return TrainConfig(stage=stage, learning_rate=a.lr, batch_size=a.batch_size, total_steps=a.steps,
                       cfg_null_prob=a.cfg_null_prob, lora_rank=a.rank, seed=a.seed, eval_every=a.eval_every)


def cmd_train_base(run: Run) -> int:
    a = run.args
    kinds = _str_list(a.kinds)
    cfg = _train_config(a, "base")
    out = run.path("checkpoints", "base.ckpt")
    if a.resume and out.exists():
        state = load_checkpoint(out)
        ads = [state.adapters[k] for k in kinds]
    else:
        state = _pretrained(run)
        state.cn = init_base_controlnet(state.unet, a.embedding, state.ae.config.downsample_factor)
        ads = new_stage1_adapters(state.cn, kinds, a.rank, a.seed)
    subsets = []
    for kind in kinds:
        images, conds, labels, _ = _load_kind(run, kind, "train")
        subsets.append(prepare_subset(kind, images, conds, labels, state.ae, state.cn.embedding))
    trainer = Trainer("base", state.unet, state.cn, subsets, state.sched, cfg, ads, state.ae)
    if a.resume and state.stage == "base":
        trainer.load_optimizer_tensors(state.optimizer, state.step)
    log = run.path("logs", "train-base.ndjson")
    while trainer.step < cfg.total_steps:
        trainer.run(min(cfg.total_steps, trainer.step + a.save_every), log_path=log)
        switch_adapter(state.cn, None)
        save_checkpoint(PipelineState(state.sched, state.ae, state.unet, state.cn, dict(zip(kinds, ads)), "base",
                                      trainer.step, trainer.optimizer_tensors(), cfg.to_dict()), out)
    for ad in ads:
        save_adapter(ad, run.path("checkpoints", f"{ad.condition_kind}.adapter"))
    return 0


def _lora_evaluator(run: Run, state: PipelineState, a):
    """Fidelity of prompt-free samples on the first ``eval_n`` validation records."""
    v_img, v_cond, v_lab, v_recs = _load_kind(run, a.kind, "val")
    v_img, v_cond, v_recs = v_img[:a.eval_n], v_cond[:a.eval_n], v_recs[:a.eval_n]
    cond_t = _cond_inputs(state, v_img, v_cond, v_lab[:a.eval_n])
    denoiser = ControlledDenoiser(state.unet, state.cn)
    params = [r.get("params") for r in v_recs]

    def evaluate(step):
        gen = _sampler(state, len(v_img), None, 1.0, a.eval_steps, a.seed, lambda x, t, y: denoiser(x, t, y, cond_t))
        return score_kind(gen, v_cond, v_img, a.kind, params).aggregate

    return evaluate


def cmd_train_lora(run: Run) -> int:
    a = run.args
    state = _base(run)
    cfg = _train_config(a, "adapt")
    images, conds, labels, _ = _load_kind(run, a.kind, "train")
    if a.max_pairs:
        images, conds, labels = images[:a.max_pairs], conds[:a.max_pairs], labels[:a.max_pairs]
    sub = prepare_subset(a.kind, images, conds, labels, state.ae, state.cn.embedding)
    adapter = attach_lora(state.cn, a.rank, a.kind, a.seed)
    trainer = Trainer("adapt", state.unet, state.cn, [sub], state.sched, cfg, [adapter], state.ae)
    evaluate = _lora_evaluator(run, state, a) if a.eval_every and a.eval_n else None
    trainer.run(eval_fn=evaluate, log_path=run.path("logs", f"train-lora-{a.kind}.ndjson"))
    save_adapter(adapter, run.path("checkpoints", f"{a.kind}.adapter"))
    spec = load_params()["kinds"][a.kind]
    series = {"kind": a.kind, "metric": spec["metric"], "gate": spec["gate"],
              "higher_is_better": spec["metric"] != "cycle_mse", "snapshots": trainer.snapshots}
    with open(run.path("reports", f"convergence-{a.kind}.json"), "w", encoding="utf-8") as f:
        json.dump(series, f, indent=2)
    return 0


def cmd_sample(run: Run) -> int:
    a = run.args
    state = _base(run)
    adapter = load_adapter(_adapter_path(run, a.adapter), state.cn)
    images, conds, labels, _ = _load_kind(run, a.cond_kind or adapter.condition_kind, a.split)
    sl = slice(a.index, a.index + a.n)
    images, conds = images[sl], conds[sl]
    if len(images) == 0:
        raise DataError(f"no records at index {a.index}")
    cond_t = _cond_inputs(state, images, conds, labels[sl])
    denoiser = ControlledDenoiser(state.unet, state.cn)
    with active(state.cn, adapter, a.strength):
        gen = _sampler(state, len(images), _class_label(a.class_label), a.guidance, a.steps, a.seed,
                       lambda x, t, y: denoiser(x, t, y, cond_t))
    out = Path(a.output) if a.output else run.path("samples", f"sample-{adapter.condition_kind}.png")
    _save_grid([conds, gen, images], out)
    print(out)
    return 0


def cmd_compose(run: Run) -> int:
    a = run.args
    state = _base(run)
    paths = _str_list(a.adapters)
    adapters = [load_adapter(_adapter_path(run, p), state.cn) for p in paths]
    weights = [float(w) for w in _str_list(a.weights)] if a.weights else [1.0] * len(adapters)
    if len(weights) != len(adapters):
        raise ConfigError("--weights needs one value per adapter")
    sl = slice(a.index, a.index + a.n)
    cond_imgs, cond_ts = [], []
    for ad in adapters:
        images, conds, labels, _ = _load_kind(run, ad.condition_kind, a.split)
        cond_imgs.append(conds[sl])
        cond_ts.append(_cond_inputs(state, images[sl], conds[sl], labels[sl]))
    denoiser = ControlledDenoiser(state.unet, state.cn)
    with active(state.cn, strength=a.strength):
        gen = _sampler(state, len(cond_imgs[0]), _class_label(a.class_label), a.guidance, a.steps, a.seed,
                       lambda x, t, y: denoiser.composed(x, t, y, adapters, weights, cond_ts))
    out = Path(a.output) if a.output else run.path("samples", "compose-" + "+".join(ad.condition_kind
                                                                                   for ad in adapters) + ".png")
    _save_grid([*cond_imgs, gen], out)
    print(out)
    return 0


def cmd_eval(run: Run) -> int:
    a = run.args
    images, conds, labels, recs = _load_kind(run, a.kind, a.split)
    images, conds, labels, recs = images[:a.n], conds[:a.n], labels[:a.n], recs[:a.n]
    if a.oracle:
        gen = images
    else:
        state = _base(run)
        adapter = load_adapter(_adapter_path(run, a.adapter or a.kind), state.cn)
        cond_t = _cond_inputs(state, images, conds, labels)
        denoiser = ControlledDenoiser(state.unet, state.cn)
        with active(state.cn, adapter, a.strength):
            gen = _sampler(state, len(images), _class_label(a.class_label), a.guidance, a.steps, a.seed,
                           lambda x, t, y: denoiser(x, t, y, cond_t))
    score = score_kind(gen, conds, images, a.kind, [r.get("params") for r in recs])
    report = {**score.to_dict(), "gate": load_params()["kinds"][a.kind]["gate"], "meets_gate": None}
    report["meets_gate"] = score.meets(report["gate"])
    out = run.path("reports", f"eval-{a.kind}.json")
    out.write_text(json.dumps(report, indent=2))
    print(json.dumps({k: report[k] for k in ("kind", "metric", "aggregate", "gate", "meets_gate")}))
    return 0


def _plot(points, threshold: float, path: Path, size=(320, 200)) -> None:
    w, h = size
    img = Image.new("RGB", size, "white")
    d = ImageDraw.Draw(img)
    xs = [p[0] for p in points]
    ys = [p[1] for p in points] + [threshold]
    x0, x1 = min(xs), max(xs) or 1
    y0, y1 = min(ys), max(ys)
    y1 = y1 if y1 > y0 else y0 + 1
    px = lambda x: 20 + (w - 40) * (x - x0) / max(x1 - x0, 1e-12)  # noqa: E731
    py = lambda y: h - 20 - (h - 40) * (y - y0) / (y1 - y0)  # noqa: E731
    d.line([(20, py(threshold)), (w - 20, py(threshold))], fill=(200, 0, 0))
    d.line([(px(x), py(y)) for x, y in points], fill=(0, 0, 160), width=2)
    d.rectangle([20, 20, w - 20, h - 20], outline=(0, 0, 0))
    img.save(path, format="PNG")


def cmd_report(run: Run) -> int:
    a = run.args
    path = Path(a.series) if a.series else run.path("reports", f"convergence-{a.kind}.json")
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read convergence series {path}: {exc}") from exc
    threshold = a.threshold if a.threshold is not None else data["gate"]
    series = analyze_convergence(data["snapshots"], threshold, data.get("higher_is_better", True))
    stem = path.stem.replace("convergence-", "")
    run.path("reports", f"regime-{stem}.json").write_text(json.dumps(series.to_dict(), indent=2))
    _plot(series.points, threshold, run.path("reports", f"convergence-{stem}.png"))
    print(json.dumps({"regime": series.regime, "steps_to_threshold": series.steps_to_threshold}))
    return 0


def cmd_count_params(run: Run) -> int:
    a = run.args
    if a.checkpoint:
        state = load_checkpoint(a.checkpoint)
        if state.cn is None:
            raise DataError(f"{a.checkpoint} holds no ControlNet")
        counts = count_parameters(state.cn, rank=a.rank)
    else:
        counts = count_parameters(arch=a.arch, rank=a.rank)
    (run.path("reports", "param-audit.json")).write_text(json.dumps(counts.to_dict(), indent=2))
    print(json.dumps(counts.to_dict()) if a.json else audit_table(counts))
    return 0


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of option values; flags take precedence")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--runs-dir", default="runs", help="parent directory of run folders")
    p.add_argument("--name", default="default", help="run folder name under --runs-dir")
    p.add_argument("--data-root", default=None, help="dataset root (default: <run>/data)")


def _training(p: argparse.ArgumentParser, steps: int) -> None:
    p.add_argument("--steps", type=int, default=steps, help="optimizer steps")
    p.add_argument("--lr", type=float, default=1e-4, help="AdamW learning rate")
    p.add_argument("--batch-size", type=int, default=32, help="batch size")
    p.add_argument("--rank", type=int, default=16, help="LoRA rank")
    p.add_argument("--cfg-null-prob", type=float, default=0.1, help="class-label dropout probability")
    p.add_argument("--eval-every", type=int, default=250, help="evaluation period in steps (0 disables)")


def _sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strength", type=float, default=1.0, help="ControlNet residual scale")
    p.add_argument("--guidance", type=float, default=7.5, help="classifier-free guidance weight")
    p.add_argument("--steps", type=int, default=50, help="DDIM steps")
    p.add_argument("--class-label", default="null", help="class label, or 'null' for prompt-free sampling")
    p.add_argument("--split", default="val", choices=["train", "val"], help="dataset split for conditions")
    p.add_argument("--index", type=int, default=0, help="first record")
    p.add_argument("--n", type=int, default=8, help="number of records")
    p.add_argument("--base", default=None, help="stage-1 checkpoint (default: <run>/checkpoints/base.ckpt)")
    p.add_argument("--output", default=None, help="output PNG path")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="ctrlora", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    params = load_params()

    p = sub.add_parser("gen-data", help="generate shape images and per-kind condition datasets", formatter_class=fmt)
    _common(p)
    p.add_argument("--n", type=int, default=6000, help="number of images")
    p.add_argument("--kinds", default=",".join(params["kinds"]), help="comma-separated condition kinds")
    p.add_argument("--val-fraction", type=float, default=0.1, help="validation fraction (floored)")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the train/val split")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the autoencoder and the class-conditional UNet", formatter_class=fmt)
    _common(p)
    p.add_argument("--corpus-kinds", default=",".join(params["base_kinds"]),
                   help="condition kinds mixed into the autoencoder corpus")
    p.add_argument("--ae-condition-fraction", type=float, default=0.25, help="share of condition images in the corpus")
    p.add_argument("--ae-hidden", type=int, default=16, help="autoencoder width")
    p.add_argument("--ae-steps", type=int, default=3000, help="autoencoder steps")
    p.add_argument("--ae-batch-size", type=int, default=32, help="autoencoder batch size")
    p.add_argument("--ae-min-psnr", type=float, default=25.0, help="held-out PSNR (dB) the autoencoder must reach")
    p.add_argument("--base-channels", type=int, default=32, help="UNet base width")
    p.add_argument("--channel-multipliers", default="1,2,4", help="UNet per-level width multipliers")
    p.add_argument("--attention-levels", default="0,1", help="UNet levels with attention")
    p.add_argument("--unet-steps", type=int, default=4000, help="UNet steps")
    p.add_argument("--unet-batch-size", type=int, default=64, help="UNet batch size")
    p.add_argument("--unet-loss-gate", type=float, default=0.9,
                   help="held-out loss must fall below this fraction of the zero predictor's")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-base", help="stage 1: Base ControlNet with one adapter per base kind",
                       formatter_class=fmt)
    _common(p)
    _training(p, 8000)
    p.add_argument("--kinds", default=",".join(params["base_kinds"]), help="base condition kinds")
    p.add_argument("--embedding", default="vae", choices=["vae", "conv"], help="condition embedding")
    p.add_argument("--pretrained", default=None, help="pretrain checkpoint (default: <run>/checkpoints/pretrain.ckpt)")
    p.add_argument("--save-every", type=int, default=1000, help="checkpoint period in steps")
    p.add_argument("--resume", action="store_true", help="continue from <run>/checkpoints/base.ckpt")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-lora", help="stage 2: new adapter for a new condition kind", formatter_class=fmt)
    _common(p)
    _training(p, 3000)
    p.add_argument("--kind", required=True, help="condition kind")
    p.add_argument("--base", default=None, help="stage-1 checkpoint (default: <run>/checkpoints/base.ckpt)")
    p.add_argument("--max-pairs", type=int, default=1000, help="training pairs used (0 = all)")
    p.add_argument("--eval-n", type=int, default=64, help="validation images per evaluation")
    p.add_argument("--eval-steps", type=int, default=50, help="DDIM steps per evaluation")
    p.set_defaults(func=cmd_train_lora)

    p = sub.add_parser("sample", help="sample with one adapter; writes a condition/sample/source grid",
                       formatter_class=fmt)
    _common(p)
    _sampling(p)
    p.add_argument("--adapter", required=True, help="adapter kind (in <run>/checkpoints) or .adapter path")
    p.add_argument("--cond-kind", default=None, help="condition kind to read (default: the adapter's)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("compose", help="sample with several adapters and summed residuals", formatter_class=fmt)
    _common(p)
    _sampling(p)
    p.add_argument("--adapters", required=True, help="comma-separated adapter kinds or paths")
    p.add_argument("--weights", default=None, help="comma-separated weights (default 1.0 each)")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("eval", help="score condition fidelity; writes a JSON report", formatter_class=fmt)
    _common(p)
    _sampling(p)
    p.add_argument("--kind", required=True, help="condition kind")
    p.add_argument("--adapter", default=None, help="adapter kind or path (default: --kind)")
    p.add_argument("--oracle", action="store_true", help="score the source images instead of samples")
    p.set_defaults(func=cmd_eval, n=64, guidance=1.0)

    p = sub.add_parser("report", help="convergence regime and plot from a series", formatter_class=fmt)
    _common(p)
    p.add_argument("--kind", default=None, help="read <run>/reports/convergence-<kind>.json")
    p.add_argument("--series", default=None, help="explicit series JSON path")
    p.add_argument("--threshold", type=float, default=None, help="fidelity threshold (default: the kind's gate)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("count-params", help="parameter audit", formatter_class=fmt)
    _common(p)
    p.add_argument("--arch", default="sd15-encoder", help="bundled architecture descriptor")
    p.add_argument("--rank", type=int, default=128, help="LoRA rank")
    p.add_argument("--checkpoint", default=None, help="count a trained ControlNet checkpoint instead")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_count_params)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config, encoding="utf-8") as f:
            values = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {args.config}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{args.config} must hold a mapping")
    values = {str(k).replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - set(vars(args)))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        args.seed = _resolve_seed(args.seed)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
        torch.manual_seed(args.seed)
        run = Run(args)
        run.attach_log()
        run.record_config()
        return args.func(run)
    except CtrLoraError as exc:
        print(f"error: {exc.category}: {' '.join(str(exc).split())}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
