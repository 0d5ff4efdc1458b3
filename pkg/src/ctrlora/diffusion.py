"""Noise schedules, forward diffusion, the epsilon-prediction loss and a
deterministic DDIM sampler with classifier-free guidance.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and
``alpha_bars[t - 1]`` is the cumulative product up to step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from .errors import DivergenceError, InvalidRangeError, ShapeError

PredictFn = Callable[..., torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = torch.as_tensor(betas, dtype=torch.float64).clone()
        if betas.ndim != 1 or betas.numel() < 1:
            raise InvalidRangeError("betas must be a non-empty 1-D sequence")
        if not torch.isfinite(betas).all() or (betas <= 0).any() or (betas >= 1).any():
            raise InvalidRangeError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, 0))

    def alpha_bar(self, t) -> torch.Tensor:
        """ᾱ_t for integer step(s) ``t`` in ``[1, T]`` (float64)."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 1).any() or (t > self.T).any():
            raise InvalidRangeError(f"timestep out of range [1, {self.T}]: {t.tolist()}")
        return self.alpha_bars[t - 1]

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls.from_betas(d["betas"])


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise InvalidRangeError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise InvalidRangeError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule.from_betas(betas)


def _broadcast_coef(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    if coef.ndim == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Diffuse ``x0`` to step ``t``: ``sqrt(ab) * x0 + sqrt(1 - ab) * eps``.

    ``t`` may be a scalar or one step per batch element.
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    ab = sched.alpha_bar(t)
    return _broadcast_coef(ab.sqrt(), x0) * x0 + _broadcast_coef((1.0 - ab).sqrt(), x0) * eps


@dataclass
class DiffusionBatch:
    x0: torch.Tensor
    cond: Optional[torch.Tensor]
    kind: int
    class_label: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor

    def __post_init__(self):
        if self.x0.shape != self.eps.shape:
            raise ShapeError("x0 and eps must share a shape")
        if self.cond is not None:
            # latent-space conditions match x0; pixel-space ones are an integer multiple of it
            (h, w), (ch, cw) = self.x0.shape[-2:], self.cond.shape[-2:]
            if ch % h or cw % w or ch // h != cw // w:
                raise ShapeError(f"cond spatial {ch}x{cw} is not a uniform multiple of x0 spatial {h}x{w}")


def sample_timesteps(n: int, T: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    return torch.randint(1, T + 1, (n,), generator=generator)


def diffusion_loss(predict: PredictFn, batch: DiffusionBatch, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the true noise and ``predict``'s estimate.

    ``predict`` is called as ``predict(x_t, t, class_label, cond, kind)``.
    Raises :class:`DivergenceError` when the loss is not finite.
    """
    x_t = q_sample(batch.x0, batch.t, batch.eps, sched)
    pred = predict(x_t, batch.t, batch.class_label, batch.cond, batch.kind)
    if pred.shape != batch.eps.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != noise shape {tuple(batch.eps.shape)}")
    loss = (batch.eps - pred).pow(2).mean()
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite diffusion loss: {loss.item()}")
    return loss


def cfg_predict(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError("conditional and unconditional predictions differ in shape")
    return eps_uncond + w * (eps_cond - eps_uncond)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Decreasing, evenly spaced steps from T down to 1 (inclusive)."""
    if not 1 <= steps <= T:
        raise InvalidRangeError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return [T]
    ts = torch.linspace(T, 1, steps, dtype=torch.float64).round().long().tolist()
    return ts


@torch.no_grad()
def ddim_sample(
    predict: PredictFn,
    sched: NoiseSchedule,
    steps: int,
    guidance_w: float,
    seed: int,
    shape: Sequence[int],
    predict_uncond: Optional[PredictFn] = None,
    max_abs: float = 1e4,
    x_T: Optional[torch.Tensor] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM sampling.

    ``predict(x_t, t)`` returns the conditional noise estimate for a batch at
    integer step ``t``. When ``guidance_w != 1`` an unconditional estimator is
    required and the two are blended with :func:`cfg_predict`.
    """
    if guidance_w != 1.0 and predict_uncond is None:
        raise InvalidRangeError("guidance_w != 1 requires predict_uncond")
    if x_T is None:
        gen = torch.Generator().manual_seed(int(seed))
        x = torch.randn(tuple(shape), generator=gen, dtype=torch.float64).to(dtype)
    else:
        x = x_T.to(dtype).clone()
    ts = ddim_timesteps(sched.T, steps)
    for i, t in enumerate(ts):
        ab = sched.alpha_bars[t - 1]
        ab_prev = sched.alpha_bars[ts[i + 1] - 1] if i + 1 < len(ts) else torch.tensor(1.0, dtype=torch.float64)
        eps = predict(x, t)
        if guidance_w != 1.0:
            eps = cfg_predict(eps, predict_uncond(x, t), guidance_w)
        x0_pred = (x - (1.0 - ab).sqrt().to(dtype) * eps) / ab.sqrt().to(dtype)
        x = ab_prev.sqrt().to(dtype) * x0_pred + (1.0 - ab_prev).sqrt().to(dtype) * eps
        if not torch.isfinite(x).all() or x.abs().max() > max_abs:
            raise DivergenceError(f"DDIM state left the bound {max_abs:g} at t={t}")
    return x
