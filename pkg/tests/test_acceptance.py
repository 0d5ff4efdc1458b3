"""Acceptance criteria, one test each; verdict lines are printed in the session summary.

Criteria 8-10 train desk-scale models. Their artifacts are cached under
``$CTRLORA_EXPERIMENT_CACHE`` (default ``runs/cache`` next to this package), so
only the first run pays the training cost.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import SMALL, TINY, VERDICTS, frozen_unet, randomize
from ctrlora.autoencoder import Autoencoder, AutoencoderConfig, psnr
from ctrlora.conditions import round_robin_batches, to_tensor, to_uint8
from ctrlora.controlnet import (ControlledDenoiser, attach_lora, compose_controls, controlnet_forward,
                                init_base_controlnet, switch_adapter)
from ctrlora.diffusion import DiffusionBatch, diffusion_loss, make_linear_schedule
from ctrlora.digests import tensor_digest
from ctrlora.errors import CompatibilityError
from ctrlora.experiments import ExperimentConfig, Pipeline
from ctrlora.params import count_parameters
from ctrlora.training import (PipelineState, Trainer, TrainConfig, TrainSubset, load_adapter, load_checkpoint,
                              new_stage1_adapters, save_adapter, save_checkpoint)
from ctrlora.unet import UNet, UNetConfig

CACHE = os.environ.get("CTRLORA_EXPERIMENT_CACHE", str(Path(__file__).resolve().parents[1] / "runs" / "cache"))


def verdict(number: int, title: str, ok: bool, detail: str, started: float, budget_s: float = None):
    elapsed = time.time() - started
    within = budget_s is None or elapsed < budget_s
    status = "PASS" if ok and within else "FAIL"
    limit = f" (limit {budget_s:g}s)" if budget_s else ""
    VERDICTS.append(f"criterion {number:>2} {status}  {title}: {detail} [{elapsed:.1f}s{limit}]")
    assert ok, detail
    assert within, f"took {elapsed:.1f}s, limit {budget_s}s"


def _inputs(n, c=4, size=8, seed=0, dtype=torch.float32, classes=5):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, c, size, size, generator=gen).to(dtype)
    cond = torch.randn(n, c, size, size, generator=gen).to(dtype)
    t = torch.randint(1, 1001, (n,), generator=gen)
    y = torch.randint(0, classes, (n,), generator=gen)
    return x, t, y, cond


def _subsets(kinds, n=16, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [TrainSubset(k, torch.randn(n, 4, 8, 8, generator=gen), torch.randn(n, 4, 8, 8, generator=gen),
                        torch.randint(0, 4, (n,), generator=gen)) for k in kinds]


def _cfg(stage, steps=4):
    return TrainConfig(stage=stage, batch_size=4, total_steps=steps, learning_rate=1e-3, lora_rank=2)


def test_criterion_01_zero_init_transparency():
    t0 = time.time()
    unet = frozen_unet(SMALL)
    cn = randomize(init_base_controlnet(unet), 1, 0.2)
    model = ControlledDenoiser(unet, cn)
    mismatches = 0
    with torch.no_grad():
        for i in range(100):
            x, t, y, c = _inputs(1, seed=i)
            switch_adapter(cn, None)
            base = model(x, t, y, c)
            for overrides in (False, True):
                switch_adapter(cn, attach_lora(cn, 4, "edge", seed=1000 + i, overrides=overrides))
                mismatches += not torch.equal(model(x, t, y, c), base)
    switch_adapter(cn, None)
    verdict(1, "zero-init transparency", mismatches == 0,
            f"{mismatches} of 200 adapter outputs differ bitwise from the base output", t0, 60)


def test_criterion_02_init_transparency():
    t0 = time.time()
    unet = frozen_unet(SMALL)
    worst = 0.0
    with torch.no_grad():
        for emb in ("vae", "conv"):
            model = ControlledDenoiser(unet, init_base_controlnet(unet, emb))
            for i in range(100):
                x, t, y, c = _inputs(1, seed=i)
                if emb == "conv":
                    c = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(i))
                worst = max(worst, (model(x, t, y, c) - unet(x, t, y)).abs().max().item())
    verdict(2, "init transparency", worst == 0.0, f"max |controlled - frozen UNet| = {worst} over 2x100 pairs", t0, 60)


def test_criterion_03_switch_restore_and_isolation():
    t0 = time.time()
    unet = frozen_unet(SMALL)
    cn = randomize(init_base_controlnet(unet), 1, 0.2)
    x, t, y, c = _inputs(8)
    ads = new_stage1_adapters(cn, ("edge", "palette", "pixelate"), 2, seed=0)
    for i, ad in enumerate(ads):
        randomize(ad, 10 + i, 0.2)
    with torch.no_grad():
        base = cn(x, t, y, c)
        restored = True
        for ad in ads:
            switch_adapter(cn, ad)
            cn(x, t, y, c)
            switch_adapter(cn, None)
            restored &= all(torch.equal(a, b) for a, b in zip(base, cn(x, t, y, c)))

    ads = new_stage1_adapters(cn, ("edge", "palette", "pixelate"), 2, seed=0)
    before = [tensor_digest(a) for a in ads]
    Trainer("base", unet, cn, _subsets(("edge", "palette", "pixelate")), make_linear_schedule(), _cfg("base"),
            ads).train_step()
    after = [tensor_digest(a) for a in ads]
    stage1_isolated = after[0] != before[0] and after[1:] == before[1:]

    new = attach_lora(cn, 2, "mask_inpaint", seed=7)
    theta, new_before = tensor_digest(cn), tensor_digest(new)
    Trainer("adapt", unet, cn, _subsets(("mask_inpaint",)), make_linear_schedule(), _cfg("adapt"), [new]).train_step()
    stage2_isolated = tensor_digest(cn) == theta and tensor_digest(new) != new_before
    ok = restored and stage1_isolated and stage2_isolated
    verdict(3, "switch/restore and isolation", ok,
            f"restore bitwise={restored}, stage-1 others untouched={stage1_isolated}, "
            f"stage-2 theta untouched={stage2_isolated}", t0, 120)


def test_criterion_04_parameter_audit():
    t0 = time.time()
    counts = count_parameters(arch="sd15-encoder", rank=128)
    base_ok = abs(counts.base_total - 361e6) <= 0.1 * 361e6
    adapter_ok = abs(counts.adapter_total - 37e6) <= 0.1 * 37e6
    ratio_ok = counts.ratio <= 0.12
    verdict(4, "parameter audit", base_ok and adapter_ok and ratio_ok,
            f"base {counts.base_total:,} (361M +-10%), rank-128 adapter {counts.adapter_total:,} (37M +-10%), "
            f"ratio {counts.ratio:.4f} <= 0.12", t0, 10)


def test_criterion_05_round_robin_exactness():
    t0 = time.time()
    counts = np.bincount([plan.kind_index for plan in round_robin_batches([5000, 5000, 5000], 32, 9999, seed=0)],
                         minlength=3)
    verdict(5, "round-robin exactness", counts.tolist() == [3333, 3333, 3333],
            f"per-kind updates over 9,999 steps: {counts.tolist()}", t0, 10)


def _relative_fd_error(loss_fn, params, h=1e-6, per_tensor=6):
    grads = torch.autograd.grad(loss_fn(), params)
    analytic, numeric = [], []
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // per_tensor)):
            old = flat[i].item()
            flat[i] = old + h
            lp = loss_fn().item()
            flat[i] = old - h
            lm = loss_fn().item()
            flat[i] = old
            numeric.append((lp - lm) / (2 * h))
            analytic.append(g.view(-1)[i].item())
    a, n = torch.tensor(analytic, dtype=torch.float64), torch.tensor(numeric, dtype=torch.float64)
    return ((a - n).norm() / n.norm()).item()


def test_criterion_06_gradient_checks():
    t0 = time.time()
    sched = make_linear_schedule()
    gen = torch.Generator().manual_seed(0)
    torch.manual_seed(0)
    unet = randomize(UNet(UNetConfig(**TINY)).double(), 2, 0.3)
    n_unet = sum(p.numel() for p in unet.parameters())
    x0 = torch.randn(2, 2, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    batch = DiffusionBatch(x0, None, 0, torch.tensor([0, 1]), torch.tensor([40, 700]), eps)
    params = list(unet.parameters())
    err_loss = _relative_fd_error(lambda: diffusion_loss(lambda x, t, y, c, k: unet(x, t, y), batch, sched), params)

    frozen = frozen_unet(TINY, dtype=torch.float64)
    cn = randomize(init_base_controlnet(frozen).double(), 3, 0.3)
    ad = randomize(attach_lora(cn, 2, "edge", seed=0).double(), 4, 0.3)
    switch_adapter(cn, ad)
    model = ControlledDenoiser(frozen, cn)
    x, t, y, c = _inputs(2, c=2, size=4, dtype=torch.float64, classes=3)
    cond_batch = DiffusionBatch(x, c, 0, y, t, eps)
    lora = ad.lora_parameters()
    n_lora = sum(p.numel() for p in lora)
    err_lora = _relative_fd_error(lambda: diffusion_loss(lambda xt, tt, yy, cc, k: model(xt, tt, yy, cc), cond_batch,
                                                         sched), lora)
    ok = err_loss < 1e-3 and err_lora < 1e-3 and n_unet <= 5000 and n_lora <= 5000
    verdict(6, "gradient checks", ok, f"diffusion_loss rel err {err_loss:.2e} ({n_unet} params), "
            f"LoRA path rel err {err_lora:.2e} ({n_lora} params), float64", t0, 300)


def test_criterion_07_composition_linearity():
    t0 = time.time()
    unet = frozen_unet(SMALL)
    cn = randomize(init_base_controlnet(unet), 1, 0.2)
    ads = [randomize(attach_lora(cn, 2, k, seed=i), 10 + i, 0.2) for i, k in enumerate(("edge", "palette", "blur"))]
    x, t, y, _ = _inputs(4)
    conds = [_inputs(4, seed=s)[3] for s in (1, 2, 3)]
    w = [0.7, -0.4, 1.3]
    with torch.no_grad():
        comp = compose_controls(cn, ads, w, x, t, y, conds)
        parts = [controlnet_forward(cn, x, t, y, c, adapter=a) for a, c in zip(ads, conds)]
        manual = [sum(wi * p[j] for wi, p in zip(w, parts)) for j in range(len(comp))]
        lin_err = max((a - b).abs().max().item() for a, b in zip(comp, manual))
        model = ControlledDenoiser(unet, cn)
        zero_exact = torch.equal(model.composed(x, t, y, ads, [0.0] * 3, conds), unet(x, t, y))
    verdict(7, "composition linearity", lin_err <= 1e-6 and zero_exact,
            f"max |composed - weighted sum| = {lin_err:.2e} (<= 1e-6), all-zero weights exact={zero_exact}", t0, 60)


@pytest.fixture(scope="module")
def pipeline():
    return Pipeline(ExperimentConfig(cache_dir=CACHE))


@pytest.fixture(scope="module")
def adaptation(pipeline):
    return pipeline.cached_json("adapt", pipeline.adaptation_vs_scratch)


@pytest.mark.slow
def test_criterion_08_adaptation_advantage(adaptation):
    t0 = time.time()
    a, s = adaptation["adapt"]["steps_to_gate"], adaptation["scratch"]["steps_to_gate"]
    ratio = adaptation["ratio"]
    ok = a is not None and ratio is not None and ratio <= 0.5 and (s is None or a < s)
    bound = " (upper bound: scratch missed the gate within its budget)" if adaptation["ratio_is_upper_bound"] else ""
    verdict(8, "adaptation advantage", ok,
            f"{adaptation['kind']} gate {adaptation['gate']}: new adapter {a} steps vs scratch {s} steps, "
            f"ratio {ratio if ratio is None else round(ratio, 4)} <= 0.5{bound}", t0)


@pytest.mark.slow
def test_criterion_09_embedding_ablation(pipeline):
    t0 = time.time()
    out = pipeline.cached_json("ablation", pipeline.embedding_ablation)
    a, b = out["vae"]["steps_to_threshold"], out["conv"]["steps_to_threshold"]
    faster = a is not None and (b is None or a < b)
    regime = out["vae"]["regime"]
    verdict(9, "embedding ablation", faster and regime != "sudden",
            f"{out['kind']} gate {out['gate']}: autoencoder embedding {a} steps vs random conv {b} steps; "
            f"autoencoder regime '{regime}' (conv '{out['conv']['regime']}')", t0)


@pytest.mark.slow
def test_criterion_10_restoration_vs_unconditional(adaptation):
    t0 = time.time()
    r = adaptation["restoration"]
    verdict(10, "restoration evaluation path", r["margin_db"] >= 3.0,
            f"{adaptation['kind']} val PSNR {r['trained_psnr']:.2f} dB vs unconditional "
            f"{r['unconditional_psnr']:.2f} dB, margin {r['margin_db']:.2f} dB >= 3", t0)


def test_criterion_11_checkpoint_integrity(tmp_path):
    t0 = time.time()
    torch.manual_seed(0)
    ae = Autoencoder(AutoencoderConfig(hidden_channels=4)).eval()
    unet = frozen_unet(SMALL)
    cn = init_base_controlnet(unet)
    sched = make_linear_schedule()
    kinds = ("edge", "palette", "pixelate")
    subs = _subsets(kinds)
    ads = new_stage1_adapters(cn, kinds, 2, seed=0)
    cfg = _cfg("base", steps=8)
    tr = Trainer("base", unet, cn, subs, sched, cfg, ads, ae)
    for _ in range(5):
        tr.train_step()
    state = PipelineState(sched, ae, unet, cn, {a.condition_kind: a for a in ads}, "base", tr.step,
                          tr.optimizer_tensors(), cfg.to_dict())
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(state, p1)
    continuous = [tr.train_step() for _ in range(2)]
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    bytes_equal = p1.read_bytes() == p2.read_bytes()

    tr2 = Trainer("base", loaded.unet, loaded.cn, subs, loaded.sched, cfg, [loaded.adapters[k] for k in kinds],
                  loaded.ae)
    tr2.load_optimizer_tensors(loaded.optimizer, loaded.step)
    resumed = [tr2.train_step() for _ in range(2)]

    path = tmp_path / "edge.adapter"
    save_adapter(ads[0], path)
    other = init_base_controlnet(frozen_unet(TINY))
    try:
        load_adapter(path, other)
        rejected = False
    except CompatibilityError:
        rejected = True
    ok = bytes_equal and resumed == continuous and rejected
    verdict(11, "checkpoint integrity", ok, f"save-load-save bytes equal={bytes_equal}, resumed next-step losses "
            f"bitwise equal={resumed == continuous}, foreign adapter rejected={rejected}", t0, 300)


# supporting gates measured on the same cached experiment


@pytest.mark.slow
def test_supporting_autoencoder_and_stage1(pipeline, adaptation):
    images, conds, _, _ = pipeline.arrays("val", "edge")
    ae = pipeline.ae
    with torch.no_grad():
        x = to_tensor(images)
        rec_db = psnr(ae.decode(ae.encode(x)), x).mean().item()
        back = to_uint8(ae.decode(ae.encode(to_tensor(conds))))
    a, b = back[..., 0] > 127, conds[..., 0] > 127
    inter = np.logical_and(a, b).sum(axis=(1, 2))
    union = np.maximum(1, np.logical_or(a, b).sum(axis=(1, 2)))
    embed_iou = float(np.mean(inter / union))
    s1 = adaptation["stage1"]
    VERDICTS.append(f"supporting    autoencoder val PSNR {rec_db:.2f} dB (>= 25), edge-map embed round-trip IoU "
                    f"{embed_iou:.3f} (>= 0.5), stage-1 loss first-500 {s1['first_mean']:.4f} -> last-500 "
                    f"{s1['last_mean']:.4f}")
    assert rec_db >= 25.0
    assert embed_iou >= 0.5
    assert s1["last_mean"] < s1["first_mean"]
    k, steps = len(s1["updates_per_kind"]), s1["steps"]
    assert s1["updates_per_kind"] == [steps // k + (i < steps % k) for i in range(k)]
