import pytest
import torch

from pcc.errors import ShapeError
from pcc.vit import EncoderConfig, ViTEncoder, count_params, encode


def expected_params(cfg: EncoderConfig) -> int:
    d, e, m = cfg.patch_size, cfg.embed_dim, cfg.mlp_dim
    block = 4 * e + (3 * e * e + 3 * e) + (e * e + e) + (e * m + m) + (m * e + e)
    return (3 * d * d * e + e) + cfg.num_tokens * e + cfg.depth * block + 2 * e


@pytest.mark.parametrize("cfg", [EncoderConfig(), EncoderConfig(32, 8, 16, 1, 2), EncoderConfig(48, 16, 24, 2, 3, 2.0)])
def test_param_count_formula(cfg):
    assert count_params(ViTEncoder(cfg)) == expected_params(cfg)


def test_paper_geometry_has_576_tokens():
    cfg = EncoderConfig(image_side=384, patch_size=16, embed_dim=32, depth=1, heads=2)
    assert cfg.grid_side == 24 and cfg.num_tokens == 576
    out = ViTEncoder(cfg)(torch.zeros(1, 3, 384, 384))
    assert out.shape == (1, 576, 32)


def test_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        EncoderConfig(image_side=30, patch_size=8)
    with pytest.raises(ShapeError):
        ViTEncoder(EncoderConfig(32, 8, 16, 1, 2))(torch.zeros(1, 3, 16, 16))


def test_patchify_is_row_major():
    cfg = EncoderConfig(8, 4, 8, 1, 2)
    enc = ViTEncoder(cfg)
    img = torch.arange(3 * 8 * 8, dtype=torch.float32).reshape(1, 3, 8, 8)
    p = enc.patchify(img)
    # patch 1 is the top-right 4x4 block; its first entry is channel 0, row 0, col 4
    assert p[0, 1, 0].item() == img[0, 0, 0, 4].item()
    assert p[0, 2, 0].item() == img[0, 0, 4, 0].item()
    assert torch.equal(p[0, 3].reshape(3, 4, 4), img[0, :, 4:, 4:])


def test_same_seed_same_output():
    cfg = EncoderConfig(32, 8, 16, 2, 2, seed=5)
    x = torch.rand(2, 3, 32, 32)
    a, b = ViTEncoder(cfg), ViTEncoder(cfg)
    assert torch.equal(a(x), b(x))
    c = ViTEncoder(EncoderConfig(32, 8, 16, 2, 2, seed=6))
    assert not torch.equal(a(x), c(x))


def test_position_embedding_breaks_permutation_equivariance():
    cfg = EncoderConfig(32, 8, 16, 1, 2)
    enc = ViTEncoder(cfg)
    with torch.no_grad():
        enc.pos_embed.normal_()
    x = torch.rand(1, 3, 32, 32)
    # swap two patches in pixel space
    y = x.clone()
    y[..., :8, :8], y[..., :8, 8:16] = x[..., :8, 8:16], x[..., :8, :8]
    tx, ty = enc(x), enc(y)
    assert not torch.allclose(tx[0, [1, 0]], ty[0, [0, 1]], atol=1e-5)


def test_encode_accepts_single_hwc_image():
    enc = ViTEncoder(EncoderConfig(32, 8, 16, 1, 2))
    img = torch.rand(32, 32, 3)
    assert torch.allclose(encode(img, enc), enc(img.permute(2, 0, 1)[None])[0])
