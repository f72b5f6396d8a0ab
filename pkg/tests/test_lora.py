import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facelora.lora import (
    AdaptedLinear,
    ScalingMode,
    adapter_forward,
    init_adapter,
    lora_param_count,
    lora_scale,
    merge,
)


def test_init_standard_scale_and_zero_b():
    a = init_adapter(8, 8, 4, alpha=16, mode="standard", seed=0)
    assert a.scale == 4.0
    assert torch.count_nonzero(a.B) == 0
    assert a.A.shape == (4, 8) and a.B.shape == (8, 4)


def test_init_rank_stabilized_paper_preset():
    a = init_adapter(384, 384, 16, alpha=16, mode=ScalingMode.RANK_STABILIZED, seed=0)
    assert a.scale == 4.0


@pytest.mark.parametrize("r", [0, -1, 9, 16])
def test_rank_bounds(r):
    with pytest.raises(ValueError, match="rank"):
        init_adapter(8, 8, r)


def test_non_positive_alpha():
    with pytest.raises(ValueError, match="alpha"):
        init_adapter(8, 8, 2, alpha=0)


def test_rank_above_half_warns():
    with pytest.warns(UserWarning, match="low-rank"):
        init_adapter(8, 8, 5)


def test_init_deterministic_and_variance():
    a1, a2 = init_adapter(64, 256, 16, seed=3), init_adapter(64, 256, 16, seed=3)
    assert torch.equal(a1.A, a2.A)
    assert not torch.equal(a1.A, init_adapter(64, 256, 16, seed=4).A)
    # A ~ N(0, 1/k)
    assert abs(a1.A.double().var().item() * 256 - 1) < 0.1


def test_hand_example_forward_and_merge():
    layer = AdaptedLinear(torch.eye(2, dtype=torch.float64), rank=1, alpha=1, mode="standard")
    with torch.no_grad():
        layer.adapters[0].A.copy_(torch.tensor([[1.0, 0.0]]))
        layer.adapters[0].B.copy_(torch.tensor([[0.0], [1.0]]))
    out = adapter_forward(layer, torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert out.tolist() == [1.0, 1.0]
    assert merge(layer).tolist() == [[1.0, 0.0], [1.0, 1.0]]


def test_fresh_adapter_is_transparent():
    g = torch.Generator().manual_seed(0)
    w, b = torch.randn(6, 5, generator=g), torch.randn(6, generator=g)
    layer = AdaptedLinear(w, b, rank=2)
    x = torch.randn(7, 5, generator=g)
    assert torch.equal(layer(x), torch.nn.functional.linear(x, w, b))
    assert torch.equal(merge(layer), w)


def _random_layer(seed, d=6, k=6, r=2, heads=1, dtype=torch.float64, bias=True):
    g = torch.Generator().manual_seed(seed)
    layer = AdaptedLinear(
        torch.randn(d, k, generator=g, dtype=dtype),
        torch.randn(d, generator=g, dtype=dtype) if bias else None,
        rank=r,
        alpha=3.0,
        mode="rank_stabilized",
        heads=heads,
        seed=seed,
    )
    with torch.no_grad():
        for a in layer.adapters:
            a.B.normal_(generator=g)
    return layer, g


def test_forward_matches_dense_oracle():
    layer, g = _random_layer(1)
    scale = 3.0 / math.sqrt(2)
    a = layer.adapters[0]
    dense = layer.weight + scale * a.B @ a.A
    for _ in range(20):
        x = torch.randn(6, generator=g, dtype=torch.float64)
        expect = dense @ x + layer.bias
        got = adapter_forward(layer, x)
        assert torch.linalg.norm(got - expect) <= 1e-6 * torch.linalg.norm(expect)


@pytest.mark.parametrize("heads", [1, 3])
def test_merge_equivalence_double(heads):
    layer, g = _random_layer(2, d=12, k=4, r=2, heads=heads)
    lin = layer.to_linear()
    x = torch.randn(100, 4, generator=g, dtype=torch.float64)
    assert (lin(x) - layer(x)).abs().max() <= 1e-10


def test_merge_equivalence_single():
    layer, g = _random_layer(3, d=32, k=24, r=4, dtype=torch.float32)
    x = torch.randn(100, 24, generator=g)
    assert (layer.to_linear()(x) - layer(x)).abs().max() <= 1e-5


def test_merge_does_not_mutate():
    layer, _ = _random_layer(4)
    w = layer.weight.clone()
    a = [(ad.A.clone(), ad.B.clone()) for ad in layer.adapters]
    merged = merge(layer)
    merged += 1
    assert torch.equal(layer.weight, w)
    assert all(torch.equal(ad.A, A) and torch.equal(ad.B, B) for ad, (A, B) in zip(layer.adapters, a))


def test_per_head_delta_is_block_stacked():
    layer, _ = _random_layer(5, d=12, k=4, r=2, heads=3)
    delta = layer.delta()
    for i, a in enumerate(layer.adapters):
        assert torch.allclose(delta[4 * i:4 * i + 4], a.scale * a.B @ a.A)
    assert layer.trainable_count() == 3 * 2 * (4 + 4)


def test_dimension_mismatch():
    layer, _ = _random_layer(6)
    with pytest.raises(ValueError, match="last dim"):
        layer(torch.zeros(5, dtype=torch.float64))


@pytest.mark.parametrize("r", [1, 4, 16, 64])
def test_scaling_law(r):
    ratio = lora_scale(16, r, "rank_stabilized") / lora_scale(16, r, "standard")
    assert ratio == pytest.approx(math.sqrt(r), rel=1e-15)


@given(st.integers(1, 64), st.floats(0.1, 100))
def test_scaling_law_property(r, alpha):
    assert lora_scale(alpha, r, "rank_stabilized") / lora_scale(alpha, r, "standard") == pytest.approx(math.sqrt(r))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.data())
def test_param_count(d, k, data):
    r = data.draw(st.integers(1, min(d, k)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        layer = AdaptedLinear(torch.zeros(d, k), rank=r)
    assert layer.trainable_count() == lora_param_count(d, k, r) == r * (d + k)
    if r < d * k / (d + k):
        assert r * (d + k) < d * k


def test_gradient_step_leaves_base_frozen():
    layer, g = _random_layer(7, dtype=torch.float32)
    w, b = layer.weight.clone(), layer.bias.clone()
    a0 = layer.adapters[0].A.clone()
    opt = torch.optim.AdamW([p for p in layer.parameters() if p.requires_grad], lr=1e-2)
    loss = layer(torch.randn(8, 6, generator=g)).pow(2).sum()
    loss.backward()
    assert layer.weight.grad is None and layer.bias.grad is None
    opt.step()
    assert torch.equal(layer.weight, w) and torch.equal(layer.bias, b)
    assert not torch.equal(layer.adapters[0].A, a0)


def test_numpy_roundtrip_of_delta():
    layer, _ = _random_layer(8)
    a = layer.adapters[0]
    expect = np.asarray(a.B.detach()) @ np.asarray(a.A.detach()) * a.scale
    np.testing.assert_allclose(layer.delta().detach().numpy(), expect, rtol=1e-12)
