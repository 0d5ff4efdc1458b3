import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlora.diffusion import (DiffusionBatch, NoiseSchedule, cfg_predict, ddim_sample, ddim_timesteps,
                               diffusion_loss, make_linear_schedule, q_sample, sample_timesteps)
from ctrlora.errors import DivergenceError, InvalidRangeError, ShapeError


def test_linear_schedule_matches_numpy_oracle():
    s = make_linear_schedule()
    betas = np.linspace(1e-4, 0.02, 1000, dtype=np.float64)
    np.testing.assert_allclose(s.betas.numpy(), betas, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bars.numpy(), np.cumprod(1 - betas), rtol=1e-12)
    assert s.T == 1000
    assert s.alpha_bar(1).item() == pytest.approx(1 - 1e-4, abs=1e-15)
    # frozen value: prod(1 - beta) over the full linear schedule
    assert s.alpha_bar(1000).item() == pytest.approx(4.035829e-05, rel=1e-5)


def test_schedule_strictly_decreasing_and_roundtrip():
    s = make_linear_schedule()
    assert bool((s.alpha_bars[1:] < s.alpha_bars[:-1]).all())
    s2 = NoiseSchedule.from_dict(s.to_dict())
    assert torch.equal(s.alpha_bars, s2.alpha_bars)


@pytest.mark.parametrize("bad", [[0.0, 0.1], [0.1, 1.0], [-0.1]])
def test_schedule_rejects_bad_betas(bad):
    with pytest.raises(InvalidRangeError):
        NoiseSchedule.from_betas(torch.tensor(bad, dtype=torch.float64))


def test_alpha_bar_range_checked():
    s = make_linear_schedule(T=10)
    for t in (0, 11):
        with pytest.raises(InvalidRangeError):
            s.alpha_bar(t)


def test_q_sample_closed_form():
    s = make_linear_schedule()
    x0 = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([1, 500, 1000])
    out = q_sample(x0, t, eps, s)
    for i, ti in enumerate(t.tolist()):
        ab = float(np.cumprod(1 - np.linspace(1e-4, 0.02, 1000))[ti - 1])
        ref = np.sqrt(ab) * x0[i].numpy() + np.sqrt(1 - ab) * eps[i].numpy()
        np.testing.assert_allclose(out[i].numpy(), ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(1, 1000))
def test_sample_timesteps_in_range(n, T):
    t = sample_timesteps(n, T, torch.Generator().manual_seed(n))
    assert t.shape == (n,) and int(t.min()) >= 1 and int(t.max()) <= T


def test_diffusion_loss_perfect_predictor_is_zero():
    s = make_linear_schedule()
    x0 = torch.randn(4, 2, 4, 4)
    eps = torch.randn_like(x0)
    b = DiffusionBatch(x0, None, 0, torch.zeros(4, dtype=torch.long), torch.tensor([1, 10, 100, 1000]), eps)
    assert diffusion_loss(lambda *a: eps, b, s).item() == 0.0
    assert diffusion_loss(lambda x, *a: torch.zeros_like(x), b, s).item() == pytest.approx(eps.pow(2).mean().item())


def test_diffusion_loss_errors():
    s = make_linear_schedule()
    x0 = torch.randn(2, 2, 4, 4)
    b = DiffusionBatch(x0, None, 0, torch.zeros(2, dtype=torch.long), torch.tensor([5, 6]), torch.randn_like(x0))
    with pytest.raises(DivergenceError):
        diffusion_loss(lambda x, *a: torch.full_like(x, float("nan")), b, s)
    with pytest.raises(ShapeError):
        diffusion_loss(lambda x, *a: x[:1], b, s)
    DiffusionBatch(x0, torch.randn(2, 3, 16, 16), 0, b.class_label, b.t, b.eps)  # pixel-space condition
    with pytest.raises(ShapeError):
        DiffusionBatch(x0, torch.randn(2, 3, 6, 6), 0, b.class_label, b.t, b.eps)
    with pytest.raises(ShapeError):
        DiffusionBatch(x0, torch.randn(2, 3, 8, 16), 0, b.class_label, b.t, b.eps)


def test_diffusion_loss_gradient_matches_finite_differences():
    # tiny per-channel affine predictor (well under 200 parameters), float64
    s = make_linear_schedule()
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    b = DiffusionBatch(x0, None, 0, torch.zeros(3, dtype=torch.long), torch.tensor([3, 300, 900]), eps)
    w = torch.randn(2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    c = torch.randn(2, generator=gen, dtype=torch.float64, requires_grad=True)

    def predict(x_t, t, *rest):
        scale = (t.to(x_t.dtype) / 1000.0)[:, None, None, None]
        return torch.einsum("oc,nchw->nohw", w, x_t) * (1 + scale) + c[None, :, None, None]

    loss = diffusion_loss(predict, b, s)
    gw, gc = torch.autograd.grad(loss, [w, c])
    analytic = torch.cat([gw.flatten(), gc])
    numeric = []
    h = 1e-6
    for p in (w, c):
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            lp = diffusion_loss(predict, b, s).item()
            flat[i] = old - h
            lm = diffusion_loss(predict, b, s).item()
            flat[i] = old
            numeric.append((lp - lm) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel < 1e-4


def test_ddim_timesteps():
    assert ddim_timesteps(1000, 1) == [1000]
    ts = ddim_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 1000 and ts[-1] == 1
    assert all(a > b for a, b in zip(ts, ts[1:]))
    with pytest.raises(InvalidRangeError):
        ddim_timesteps(10, 11)


def test_ddim_with_oracle_noise_recovers_x0():
    # for a point-mass data distribution the exact noise estimate is available in closed form
    s = make_linear_schedule()
    x0 = torch.randn(2, 2, 4, 4, dtype=torch.float64)

    def oracle(x, t):
        ab = s.alpha_bars[t - 1]
        return (x - ab.sqrt() * x0) / (1 - ab).sqrt()

    out = ddim_sample(oracle, s, 20, 1.0, seed=3, shape=x0.shape, dtype=torch.float64)
    torch.testing.assert_close(out, x0, rtol=1e-9, atol=1e-9)


def test_ddim_deterministic_and_seeded():
    s = make_linear_schedule()
    f = lambda x, t: 0.1 * x  # noqa: E731
    a = ddim_sample(f, s, 10, 1.0, seed=1, shape=(2, 2, 4, 4))
    b = ddim_sample(f, s, 10, 1.0, seed=1, shape=(2, 2, 4, 4))
    c = ddim_sample(f, s, 10, 1.0, seed=2, shape=(2, 2, 4, 4))
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_cfg_blend_and_guidance_requirements():
    ec, eu = torch.randn(2, 3), torch.randn(2, 3)
    assert torch.equal(cfg_predict(ec, eu, 1.0), eu + (ec - eu))
    torch.testing.assert_close(cfg_predict(ec, eu, 0.0), eu)
    torch.testing.assert_close(cfg_predict(ec, eu, 7.5), eu + 7.5 * (ec - eu))
    s = make_linear_schedule()
    with pytest.raises(InvalidRangeError):
        ddim_sample(lambda x, t: x, s, 5, 7.5, 0, (1, 2, 2, 2))


def test_ddim_divergence_guard():
    s = make_linear_schedule()
    with pytest.raises(DivergenceError):
        ddim_sample(lambda x, t: -1e3 * x, s, 10, 1.0, 0, (1, 2, 4, 4))
