"""Small from-scratch vision transformer that emits patch tokens only (no class token)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from pcc.errors import ShapeError


@dataclass
class EncoderConfig:
    image_side: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_side % self.patch_size:
            raise ShapeError(f"image side {self.image_side} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side**2

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_dim)
        self.fc2 = nn.Linear(mlp_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ViTEncoder(nn.Module):
    """Images ``(B, 3, n, n)`` -> patch tokens ``(B, s, e)`` with ``s = (n / d) ** 2``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d, e = cfg.patch_size, cfg.embed_dim
        self.patch_embed = nn.Linear(3 * d * d, e)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, e))
        self.blocks = nn.ModuleList(Block(e, cfg.heads, cfg.mlp_dim) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(e)
        init_params(self, cfg.seed)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        n, d = self.cfg.image_side, self.cfg.patch_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (n, n):
            raise ShapeError(f"expected (B, 3, {n}, {n}) images, got {tuple(images.shape)}")
        g = n // d
        # (B, 3, g, d, g, d) -> (B, g*g, 3*d*d), row-major over the patch grid
        p = images.reshape(images.shape[0], 3, g, d, g, d).permute(0, 2, 4, 1, 3, 5)
        return p.reshape(images.shape[0], g * g, 3 * d * d)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(self.patchify(images)) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def init_params(module: nn.Module, seed: int, std: float = 0.02) -> None:
    """Truncated-normal weights, zero biases, unit LayerNorm gains; seeded, so equal seeds give equal parameters."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
            if isinstance(owner, nn.LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias" or leaf.startswith("bias_"):
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std, generator=gen)


def encode(images: torch.Tensor, encoder: ViTEncoder) -> torch.Tensor:
    """Patch tokens for a batch ``(B, 3, n, n)`` or a single ``(n, n, 3)`` image."""
    if images.ndim == 3 and images.shape[-1] == 3:
        return encoder(images.permute(2, 0, 1).unsqueeze(0))[0]
    return encoder(images)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
