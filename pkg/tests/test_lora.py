import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlora.errors import CompatibilityError, ShapeError
from ctrlora.lora import LoraAdapter, fuse_adapter, key_of, lora_linear_forward, lora_targets
from conftest import TINY, frozen_unet
from ctrlora.controlnet import attach_lora, init_base_controlnet, switch_adapter


def test_zero_b_is_bitwise_base():
    gen = torch.Generator().manual_seed(0)
    W, b, x = torch.randn(7, 5, generator=gen), torch.randn(7, generator=gen), torch.randn(3, 5, generator=gen)
    A, B = torch.randn(2, 5, generator=gen), torch.zeros(7, 2)
    assert torch.equal(lora_linear_forward(W, b, A, B, 1.0, x), torch.nn.functional.linear(x, W, b))


def test_hand_evaluable_rank_one():
    W, b = torch.zeros(3, 3), torch.zeros(3)
    A = torch.tensor([[1.0, 0.0, 0.0]])
    B = torch.tensor([[1.0], [0.0], [0.0]])
    y = lora_linear_forward(W, b, A, B, 1.0, torch.tensor([3.0, 0.0, 0.0]))
    assert y.tolist() == [3.0, 0.0, 0.0]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.floats(0.25, 4.0), st.integers(0, 10_000))
def test_delta_matches_dense_oracle(r, d_in, d_out, alpha_over_r, seed):
    rng = np.random.default_rng(seed)
    W, b = rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)
    A, B, x = rng.normal(size=(r, d_in)), rng.normal(size=(d_out, r)), rng.normal(size=(4, d_in))
    scale = alpha_over_r
    t = lambda a: torch.tensor(a, dtype=torch.float64)  # noqa: E731
    y = lora_linear_forward(t(W), t(b), t(A), t(B), scale, t(x)).numpy()
    dense = x @ (scale * (B @ A)).T
    np.testing.assert_allclose(y - x @ W.T - b, dense, rtol=1e-5, atol=1e-10)


def test_shape_error():
    with pytest.raises(ShapeError):
        lora_linear_forward(torch.zeros(3, 4), None, torch.zeros(2, 5), torch.zeros(3, 2), 1.0, torch.zeros(1, 4))


def test_key_of():
    assert key_of("encoder.levels.1.attn.to_q") == "encoder__levels__1__attn__to_q"


def test_attach_targets_and_counts(small_cn):
    ad = attach_lora(small_cn, 4, "edge", seed=0)
    targets = lora_targets(small_cn)
    assert set(ad.lora_A.keys()) == set(targets)
    for k, lin in targets.items():
        assert ad.lora_A[k].shape == (4, lin.in_features)
        assert ad.lora_B[k].shape == (lin.out_features, 4)
        assert bool((ad.lora_B[k] == 0).all())
    assert sum(p.numel() for p in ad.lora_parameters()) == sum(4 * (l.in_features + l.out_features)
                                                               for l in targets.values())


def test_closed_form_per_layer_count():
    # d_in = d_out = 320 at rank 128
    assert 128 * 320 + 320 * 128 == 81_920
    ad = LoraAdapter("k", 128)
    ad.lora_A["x"] = torch.nn.Parameter(torch.zeros(128, 320))
    ad.lora_B["x"] = torch.nn.Parameter(torch.zeros(320, 128))
    assert sum(p.numel() for p in ad.lora_parameters()) == 81_920


def test_seeded_a_determinism(small_cn):
    a1 = attach_lora(small_cn, 4, "edge", seed=7)
    a2 = attach_lora(small_cn, 4, "edge", seed=7)
    a3 = attach_lora(small_cn, 4, "edge", seed=8)
    for k in a1.lora_A.keys():
        assert torch.equal(a1.lora_A[k], a2.lora_A[k])
    assert any(not torch.equal(a1.lora_A[k], a3.lora_A[k]) for k in a1.lora_A.keys())


def test_a_is_zero_mean_with_variance_one_over_r(small_cn):
    ad = attach_lora(small_cn, 8, "edge", seed=0)
    a = torch.cat([p.flatten() for p in ad.lora_A.values()]).double()
    assert abs(a.mean().item()) < 0.05
    assert a.var().item() == pytest.approx(1 / 8, rel=0.1)


def test_rank_must_be_positive():
    with pytest.raises(ShapeError):
        LoraAdapter("k", 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4), st.integers(0, 1000))
def test_effective_delta_has_rank_at_most_r(r, seed):
    gen = torch.Generator().manual_seed(seed)
    ad = LoraAdapter("k", r)
    ad.lora_A["x"] = torch.nn.Parameter(torch.randn(r, 12, generator=gen, dtype=torch.float64))
    ad.lora_B["x"] = torch.nn.Parameter(torch.randn(10, r, generator=gen, dtype=torch.float64))
    s = torch.linalg.svdvals(ad.delta_weight("x").detach())
    assert int((s > 1e-9 * s[0]).sum()) <= r


def test_overrides_copy_base(small_cn):
    ad = attach_lora(small_cn, 2, "blur", seed=0)
    assert ad.has_overrides
    for k, w in ad.zc_weight.items():
        assert bool((w == 0).all())
    plain = attach_lora(small_cn, 2, "edge", seed=0, overrides=False)
    assert not plain.has_overrides


def test_fused_export_matches_additive_forward(small_unet):
    cn = init_base_controlnet(small_unet)
    ad = attach_lora(cn, 2, "edge", seed=0)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in ad.lora_B.values():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.1)
    fused = fuse_adapter(cn, ad).state
    k = next(iter(ad.lora_A.keys()))
    name = k.replace("__", ".")
    W = cn.state_dict()[f"{name}.weight"]
    torch.testing.assert_close(fused[f"{name}.weight"], W + ad.delta_weight(k).detach())


def test_adapter_mismatch_rejected(small_cn):
    other = init_base_controlnet(frozen_unet(TINY))
    ad = attach_lora(other, 2, "edge", seed=0)
    with pytest.raises(CompatibilityError):
        switch_adapter(small_cn, ad)
