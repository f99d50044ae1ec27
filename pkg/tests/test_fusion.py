import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pcc.errors import ShapeError
from pcc.fusion import ClusterFusion, FusionMode, HVBiLSTM, embed_clusters, fuse

torch.set_default_dtype(torch.float32)


def embed_loop(u, G):
    out = np.zeros(G.shape[1])
    for l in range(G.shape[0]):
        if u[l]:
            out += G[l]
    return out


@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_embed_is_row_sum(L, H, seed):
    rng = np.random.default_rng(seed)
    u = rng.integers(0, 2, L)
    G = rng.normal(size=(L, H))
    got = embed_clusters(torch.from_numpy(u), torch.from_numpy(G)).numpy()
    np.testing.assert_allclose(got, embed_loop(u, G), atol=1e-12)


def test_embed_shape_mismatch():
    with pytest.raises(ShapeError):
        embed_clusters(torch.ones(3), torch.ones(4, 2))


def test_fuse_appends_token_to_every_patch():
    x = torch.rand(2, 4, 3)
    t = torch.rand(2, 5)
    f = fuse(x, t)
    assert f.shape == (2, 4, 8)
    assert torch.equal(f[..., :3], x)
    for i in range(4):
        assert torch.equal(f[:, i, 3:], t)
    assert fuse(x, None) is x


def _lstm_dir(xs, w_ih, w_hh, b_ih, b_hh):
    hdim = w_hh.shape[1]
    h, c = np.zeros(hdim), np.zeros(hdim)
    out = []
    for x in xs:
        gates = w_ih @ x + b_ih + w_hh @ h + b_hh
        i, f, g, o = np.split(gates, 4)
        sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
        c = sig(f) * c + sig(i) * np.tanh(g)
        h = sig(o) * np.tanh(c)
        out.append(h)
    return np.array(out)


def _bilstm(seq, rnn):
    p = {k: v.detach().double().numpy() for k, v in rnn.named_parameters()}
    fwd = _lstm_dir(seq, p["weight_ih_l0"], p["weight_hh_l0"], p["bias_ih_l0"], p["bias_hh_l0"])
    bwd = _lstm_dir(seq[::-1], p["weight_ih_l0_reverse"], p["weight_hh_l0_reverse"],
                    p["bias_ih_l0_reverse"], p["bias_hh_l0_reverse"])[::-1]
    return np.concatenate([fwd, bwd], axis=1)


def hv_oracle(tokens, m: HVBiLSTM):
    g = int(round(len(tokens) ** 0.5))
    grid = tokens.reshape(g, g, -1)
    W = {k: v.detach().double().numpy() for k, v in m.named_parameters()}

    def proj(a, name):
        return a @ W[f"{name}.weight"].T + W[f"{name}.bias"]

    h = np.stack([proj(_bilstm(grid[r], m.h_rnn), "h_proj") for r in range(g)])
    if m.residual:
        h = grid + h
    v = np.stack([proj(_bilstm(h[:, c], m.v_rnn), "v_proj") for c in range(g)], axis=1)
    if m.residual:
        v = h + v
    return v.reshape(g * g, -1)


@pytest.mark.parametrize("residual", [False, True])
@pytest.mark.parametrize("side", [2, 3])
def test_hv_bilstm_matches_unrolled_recurrence(residual, side):
    torch.manual_seed(side)
    m = HVBiLSTM(4, hidden=3, residual=residual).double()
    with torch.no_grad():
        for p in m.parameters():
            p.normal_(0, 0.5)
    x = torch.randn(side * side, 4, dtype=torch.float64)
    np.testing.assert_allclose(m(x).detach().numpy(), hv_oracle(x.numpy(), m), atol=1e-12)


def test_hv_bilstm_mixes_along_rows_and_columns():
    torch.manual_seed(0)
    m = HVBiLSTM(4, hidden=3, residual=False).double()
    with torch.no_grad():
        for p in m.parameters():
            p.normal_(0, 0.5)
    x = torch.randn(9, 4, dtype=torch.float64)
    y = x.clone()
    y[8] += 1.0  # bottom-right corner
    # every output token sees the corner: row pass then column pass reach the whole grid
    diff = (m(x) - m(y)).abs().sum(-1)
    assert (diff > 0).all()


def test_zero_weights_without_residual_give_bias_only():
    m = HVBiLSTM(4, hidden=2, residual=False)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.v_proj.bias.fill_(0.5)
    out = m(torch.randn(2, 4, 4))
    assert torch.allclose(out, torch.full_like(out, 0.5))


def test_refiner_rejects_non_square_token_count():
    with pytest.raises(ShapeError):
        HVBiLSTM(4)(torch.zeros(1, 6, 4))


def test_cluster_fusion_modes():
    x = torch.rand(2, 4, 6)
    u = torch.tensor([[1.0, 0, 1], [0, 1, 0]])
    cf = ClusterFusion(FusionMode.CLUSTER_TOKEN, num_clusters=3, cluster_dim=5)
    out = cf(x, u)
    assert out.shape == (2, 4, 11)
    assert torch.allclose(out[0, 0, 6:], cf.G[0] + cf.G[2])
    ct = ClusterFusion("class_token", cluster_dim=5)
    assert torch.equal(ct(x)[1, 3, 6:], ct.class_token)
    assert torch.equal(ClusterFusion("none")(x), x)
    with pytest.raises(ValueError):
        cf(x)
