import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pcc.errors import ShapeError
from pcc.fusion import FusionMode
from pcc.head import PCCModel, classify_patches, forward_loss, image_label_vector, mce_loss, topk_pool
from pcc.vit import EncoderConfig


def softmax_loop(F, W):
    out = np.zeros((F.shape[0], W.shape[1]))
    for i in range(F.shape[0]):
        logits = [sum(F[i, d] * W[d, c] for d in range(F.shape[1])) for c in range(W.shape[1])]
        m = max(logits)
        e = [math.exp(v - m) for v in logits]
        out[i] = [v / sum(e) for v in e]
    return out


def topk_loop(Z, k):
    return np.array([np.mean(sorted(Z[:, c], reverse=True)[:k]) for c in range(Z.shape[1])])


def test_classify_matches_loop():
    rng = np.random.default_rng(0)
    F, W = rng.normal(size=(5, 3)), rng.normal(size=(3, 4))
    got = classify_patches(torch.from_numpy(F), torch.from_numpy(W)).numpy()
    np.testing.assert_allclose(got, softmax_loop(F, W), rtol=1e-12)
    np.testing.assert_allclose(got.sum(1), 1.0)


def test_topk_exact_and_bounds():
    Z = torch.tensor([[0.1, 0.9], [0.7, 0.2], [0.4, 0.4], [0.7, 0.5]], dtype=torch.float64)
    assert topk_pool(Z, 2).tolist() == [0.7, (0.9 + 0.5) / 2]
    assert torch.allclose(topk_pool(Z, 4), Z.mean(0), rtol=1e-15)
    assert torch.equal(topk_pool(Z, 1), Z.max(0).values)
    for k in (0, 5):
        with pytest.raises(ShapeError):
            topk_pool(Z, k)


def test_topk_ties_send_gradient_to_lower_index():
    Z = torch.tensor([[0.5], [0.5], [0.5]], requires_grad=True)
    topk_pool(Z, 2).sum().backward()
    assert Z.grad[:, 0].tolist() == [0.5, 0.5, 0.0]


@given(st.integers(1, 12), st.integers(1, 4), st.data())
@settings(max_examples=60, deadline=None)
def test_topk_matches_sorted_loop(s, C, data):
    k = data.draw(st.integers(1, s))
    Z = np.array(data.draw(st.lists(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=C, max_size=C),
                                    min_size=s, max_size=s)))
    got = topk_pool(torch.from_numpy(Z), k).numpy()
    assert np.array_equal(got, topk_loop(Z, k))
    assert np.all(got <= Z.max(0)) and np.all(got >= Z.mean(0) - 1e-15)


def test_mce_known_values():
    p = torch.tensor([0.5, 0.5], dtype=torch.float64)
    assert mce_loss(p, torch.tensor([1.0, 0.0])).item() == pytest.approx(math.log(2), rel=1e-12)
    p = torch.tensor([0.9, 0.2, 0.6], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    want = (-math.log(0.9) - math.log(0.8) - math.log(0.6)) / 3
    assert mce_loss(p, y).item() == pytest.approx(want, rel=1e-12)


def test_mce_clips_and_background_switch():
    p = torch.tensor([0.0, 1.0], dtype=torch.float64)
    y = torch.tensor([1.0, 1.0], dtype=torch.float64)
    assert mce_loss(p, y).item() == pytest.approx((-math.log(1e-7) - math.log(1 - 1e-7)) / 2, rel=1e-12)
    assert mce_loss(p, y, include_background=False).item() == pytest.approx(-math.log(1 - 1e-7), abs=1e-12)
    with pytest.raises(ShapeError):
        mce_loss(p, torch.ones(3))


def test_label_vector_background_always_on():
    names = ["background", "a", "b"]
    assert image_label_vector([], names).tolist() == [1, 0, 0]
    assert image_label_vector(["b"], names).tolist() == [1, 0, 1]


@pytest.mark.parametrize("mode", list(FusionMode))
def test_model_shapes_and_simplex(mode):
    cfg = EncoderConfig(16, 8, 8, 1, 2)
    model = PCCModel(cfg, 3, mode, num_clusters=2, cluster_dim=4)
    u = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
    Z = model(torch.rand(2, 3, 16, 16), u if mode is FusionMode.CLUSTER_TOKEN else None)
    assert Z.shape == (2, 4, 3)
    assert torch.allclose(Z.sum(-1), torch.ones(2, 4))
    loss, _ = forward_loss(model, torch.rand(2, 3, 16, 16), torch.tensor([[1.0, 1, 0], [1, 0, 1]]),
                           u if mode is FusionMode.CLUSTER_TOKEN else None, k=2)
    assert loss.ndim == 0 and loss.item() > 0


def test_cluster_token_changes_predictions():
    model = PCCModel(EncoderConfig(16, 8, 8, 1, 2), 3, "cluster_token", num_clusters=2, cluster_dim=4)
    with torch.no_grad():
        model.fusion.G.normal_()
    x = torch.rand(1, 3, 16, 16)
    a = model(x, torch.tensor([[1.0, 0.0]]))
    b = model(x, torch.tensor([[0.0, 1.0]]))
    assert not torch.allclose(a, b)


@given(st.integers(2, 9), st.integers(2, 4), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_patch_permutation_permutes_rows_and_keeps_pooling(s, C, seed):
    g = torch.Generator().manual_seed(seed)
    F = torch.randn(s, 5, generator=g, dtype=torch.float64)
    W = torch.randn(5, C, generator=g, dtype=torch.float64)
    perm = torch.randperm(s, generator=g)
    Z, Zp = classify_patches(F, W), classify_patches(F[perm], W)
    assert torch.equal(Zp, Z[perm])
    k = min(3, s)
    assert torch.allclose(topk_pool(Zp, k), topk_pool(Z, k), rtol=0, atol=1e-15)
