"""Condition-fidelity scores, a latent Fréchet distance and convergence analytics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .conditions import condition_kind, edge_map, extract_condition, load_params, to_tensor
from .errors import DataError, InsufficientDataError, ShapeError


@dataclass
class FidelityScore:
    kind: str
    metric: str
    per_image: list
    aggregate: float

    @property
    def higher_is_better(self) -> bool:
        return self.metric != "cycle_mse"

    def meets(self, gate: float) -> bool:
        return self.aggregate >= gate if self.higher_is_better else self.aggregate <= gate

    def to_dict(self) -> dict:
        return {"kind": self.kind, "metric": self.metric, "aggregate": self.aggregate, "per_image": self.per_image}


def _as_uint8(images) -> np.ndarray:
    arr = np.asarray(images)
    if arr.dtype != np.uint8 or arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected uint8 (N, H, W, 3) images, got {arr.dtype} {arr.shape}")
    return arr


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def cycle_fidelity(generated, conditions, kind: str, params: Optional[Sequence[dict]] = None) -> FidelityScore:
    """Re-extract ``kind`` from each generated image and score against its input condition.

    Binary edge maps are scored by IoU, continuous maps by MSE on a [0, 1] scale.
    """
    gen, cond = _as_uint8(generated), _as_uint8(conditions)
    if gen.shape != cond.shape or len(gen) < 1:
        raise ShapeError("generated and condition sets must be non-empty and paired")
    if not condition_kind(kind).structural:
        raise DataError(f"{kind!r} is a restoration kind; use ground_truth_fidelity")
    scores = []
    for i, (g, c) in enumerate(zip(gen, cond)):
        if kind == "edge":
            scores.append(iou(edge_map(g), c[..., 0] > 127))
        else:
            re = extract_condition(g, kind, None if params is None else params[i])
            scores.append(float(np.mean((re.astype(np.float64) / 255.0 - c.astype(np.float64) / 255.0) ** 2)))
    metric = "cycle_iou" if kind == "edge" else "cycle_mse"
    return FidelityScore(kind, metric, scores, float(np.mean(scores)))


def psnr_uint8(a: np.ndarray, b: np.ndarray, cap: Optional[float] = None) -> float:
    cap = load_params()["psnr_cap"] if cap is None else cap
    mse = np.mean((a.astype(np.float64) / 255.0 - b.astype(np.float64) / 255.0) ** 2)
    if mse == 0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def ground_truth_fidelity(generated, ground_truth, kind: str = "restoration") -> FidelityScore:
    """Per-image PSNR (dB, [0, 1] peak) against clean images; zero error reports the cap."""
    gen, gt = _as_uint8(generated), _as_uint8(ground_truth)
    if gen.shape != gt.shape or len(gen) < 1:
        raise ShapeError(f"generated {gen.shape} and ground truth {gt.shape} must be non-empty and paired")
    if kind in load_params()["kinds"] and condition_kind(kind).structural:
        raise DataError(f"{kind!r} is a structural kind; use cycle_fidelity")
    scores = [psnr_uint8(g, t) for g, t in zip(gen, gt)]
    return FidelityScore(kind, "gt_psnr", scores, float(np.mean(scores)))


def score_kind(generated, conditions, ground_truth, kind: str, params=None) -> FidelityScore:
    if condition_kind(kind).structural:
        return cycle_fidelity(generated, conditions, kind, params)
    return ground_truth_fidelity(generated, ground_truth, kind)


# ------------------------------------------------------------ Fréchet

def latent_features(images, autoencoder, pool: int = 2) -> np.ndarray:
    """Autoencoder posterior means average-pooled to ``pool`` x ``pool`` cells, flattened."""
    x = to_tensor(_as_uint8(images)) if isinstance(images, np.ndarray) else images
    with torch.no_grad():
        z = torch.cat([autoencoder.encode(x[i:i + 256].to(autoencoder.latent_scale.dtype))
                       for i in range(0, len(x), 256)])
        z = torch.nn.functional.adaptive_avg_pool2d(z, pool)
    return z.flatten(1).double().numpy()


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    r = _sqrt_psd(s1)
    inner = r @ s2 @ r
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_distance(mu1, sigma1, mu2, sigma2, loading: float = 1e-6) -> float:
    d = mu1.shape[0]
    s1 = sigma1 + loading * np.eye(d)
    s2 = sigma2 + loading * np.eye(d)
    # average both orderings so the result is exactly symmetric in floating point
    tr = 0.5 * (_trace_sqrt_product(s1, s2) + _trace_sqrt_product(s2, s1))
    diff = mu1 - mu2
    return float(max(0.0, diff @ diff + (np.trace(s1) + np.trace(s2)) - 2.0 * tr))


def feature_stats(feats: np.ndarray):
    return feats.mean(0), np.cov(feats, rowvar=False)


def feature_distance(set_a, set_b, autoencoder, loading: float = 1e-6) -> float:
    """Fréchet distance between Gaussians fitted to pooled autoencoder latents of each set."""
    if len(set_a) < 16 or len(set_b) < 16:
        raise InsufficientDataError("feature_distance needs at least 16 images per set")
    fa, fb = latent_features(set_a, autoencoder), latent_features(set_b, autoencoder)
    return frechet_distance(*feature_stats(fa), *feature_stats(fb), loading=loading)


# ------------------------------------------------------------ convergence

@dataclass
class ConvergenceSeries:
    points: list  # (step, fidelity)
    threshold: float
    higher_is_better: bool = True
    steps_to_threshold: Optional[int] = None
    regime: str = "gradual"
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"points": [list(p) for p in self.points], "threshold": self.threshold,
                "higher_is_better": self.higher_is_better, "steps_to_threshold": self.steps_to_threshold,
                "regime": self.regime, "details": self.details}


def first_step_meeting(points, threshold: float, higher_is_better: bool = True) -> Optional[int]:
    for step, v in points:
        if (v >= threshold) if higher_is_better else (v <= threshold):
            return int(step)
    return None


def classify_regime(values: Sequence[float], threshold: float, higher_is_better: bool = True,
                    jump_fraction: float = 0.5, flat_fraction: float = 0.1, min_prefix: int = 2,
                    min_crossings: int = 3) -> tuple[str, dict]:
    """Label a fidelity curve ``sudden``, ``oscillating`` or ``gradual``.

    sudden: one eval-to-eval improvement larger than ``jump_fraction`` of the
    curve's range, preceded by at least ``min_prefix`` evaluations whose
    spread is within ``flat_fraction`` of the range.
    oscillating: at least ``min_crossings`` threshold crossings (which forces
    both directions).
    """
    v = np.asarray(values, dtype=np.float64)
    if not higher_is_better:
        v, threshold = -v, -threshold
    rng = float(v.max() - v.min())
    above = v >= threshold
    crossings = int(np.count_nonzero(above[1:] != above[:-1]))
    details = {"range": rng, "crossings": crossings, "jump_index": None}
    if rng > 0:
        for i in range(min_prefix - 1, len(v) - 1):
            prefix = v[:i + 1]
            if v[i + 1] - v[i] > jump_fraction * rng and prefix.max() - prefix.min() <= flat_fraction * rng:
                details["jump_index"] = i + 1
                return "sudden", details
    if crossings >= min_crossings:
        return "oscillating", details
    return "gradual", details


def analyze_convergence(snapshots: Sequence[tuple[int, float]], threshold: float,
                        higher_is_better: bool = True, metrics_log: Optional[Sequence[dict]] = None) -> ConvergenceSeries:
    """Build the series, first step meeting ``threshold`` and the regime label.

    ``snapshots`` are ``(step, fidelity)`` evaluations with strictly increasing steps.
    """
    pts = [(int(s), float(v)) for s, v in snapshots]
    if len(pts) < 5:
        raise InsufficientDataError(f"need at least 5 evaluations, got {len(pts)}")
    steps = [s for s, _ in pts]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise DataError("evaluation steps must be strictly increasing")
    regime, details = classify_regime([v for _, v in pts], threshold, higher_is_better)
    if metrics_log:
        losses = [r["loss"] for r in metrics_log if "loss" in r]
        if losses:
            details["final_loss"] = float(np.mean(losses[-min(len(losses), 100):]))
    return ConvergenceSeries(pts, threshold, higher_is_better, first_step_meeting(pts, threshold, higher_is_better),
                             regime, details)
