"""Cluster-token embedding, concatenation onto patch tokens, and HV-BiLSTM refinement."""

from __future__ import annotations

import math
from enum import Enum

import torch
import torch.nn as nn

from pcc.errors import ShapeError
from pcc.vit import init_params


class FusionMode(str, Enum):
    NONE = "none"
    CLASS_TOKEN = "class_token"
    CLUSTER_TOKEN = "cluster_token"


def embed_clusters(u: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    """Cluster token ``u @ G``: the plain sum of the rows of ``G`` selected by ``u``.

    ``u`` is ``(L,)`` or ``(B, L)``; ``G`` is ``(L, H)``.
    """
    if u.shape[-1] != G.shape[0]:
        raise ShapeError(f"cluster vector length {u.shape[-1]} != G rows {G.shape[0]}")
    return u.to(G.dtype) @ G


def fuse(patch_tokens: torch.Tensor, token: torch.Tensor | None) -> torch.Tensor:
    """Append ``token`` to every patch token: ``(…, s, e)`` + ``(…, H)`` -> ``(…, s, e + H)``."""
    if token is None or token.shape[-1] == 0:
        return patch_tokens
    s = patch_tokens.shape[-2]
    expanded = token.unsqueeze(-2).expand(*token.shape[:-1], s, token.shape[-1])
    return torch.cat([patch_tokens, expanded], dim=-1)


def grid_side(num_tokens: int) -> int:
    g = math.isqrt(num_tokens)
    if g * g != num_tokens:
        raise ShapeError(f"{num_tokens} tokens do not form a square grid")
    return g


class HVBiLSTM(nn.Module):
    """Bidirectional LSTM along grid rows, then along grid columns.

    Each pass runs a BiLSTM with ``hidden`` units per direction and projects
    the concatenated directions back to ``dim``. With ``residual=True`` each
    pass is added to its input; without it a from-scratch model stalls at the
    label-prior loss.
    """

    def __init__(self, dim: int, hidden: int | None = None, residual: bool = True):
        super().__init__()
        hidden = hidden or max(1, dim // 2)
        self.dim = dim
        self.hidden = hidden
        self.residual = residual
        self.h_rnn = nn.LSTM(dim, hidden, batch_first=True, bidirectional=True)
        self.h_proj = nn.Linear(2 * hidden, dim)
        self.v_rnn = nn.LSTM(dim, hidden, batch_first=True, bidirectional=True)
        self.v_proj = nn.Linear(2 * hidden, dim)

    def _pass(self, x: torch.Tensor, rnn: nn.LSTM, proj: nn.Linear) -> torch.Tensor:
        # x: (B, g_outer, g_inner, D); recur along g_inner
        b, go, gi, d = x.shape
        out, _ = rnn(x.reshape(b * go, gi, d))
        out = proj(out).reshape(b, go, gi, d)
        return x + out if self.residual else out

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        b, s, d = tokens.shape
        if d != self.dim:
            raise ShapeError(f"token dim {d} != refiner dim {self.dim}")
        g = grid_side(s)
        x = tokens.reshape(b, g, g, d)
        x = self._pass(x, self.h_rnn, self.h_proj)
        x = self._pass(x.transpose(1, 2), self.v_rnn, self.v_proj).transpose(1, 2)
        x = x.reshape(b, s, d)
        return x[0] if squeeze else x


def refine(fused: torch.Tensor, refiner: HVBiLSTM) -> torch.Tensor:
    return refiner(fused)


class ClusterFusion(nn.Module):
    """Builds the extra token for the chosen ablation arm and appends it to the patch tokens.

    ``cluster_token``: ``u @ G`` from the image's cluster vector.
    ``class_token``: one learned vector of length ``H`` shared by all images.
    ``none``: patch tokens pass through unchanged.
    """

    def __init__(self, mode: FusionMode | str, num_clusters: int = 0, cluster_dim: int = 32, seed: int = 0):
        super().__init__()
        self.mode = FusionMode(mode)
        if self.mode is FusionMode.CLUSTER_TOKEN:
            if num_clusters < 1:
                raise ShapeError("cluster_token fusion needs at least one cluster")
            self.G = nn.Parameter(torch.empty(num_clusters, cluster_dim))
        elif self.mode is FusionMode.CLASS_TOKEN:
            self.class_token = nn.Parameter(torch.empty(cluster_dim))
        self.out_extra = 0 if self.mode is FusionMode.NONE else cluster_dim
        init_params(self, seed)

    def token(self, cluster_vectors: torch.Tensor | None, batch: int) -> torch.Tensor | None:
        if self.mode is FusionMode.CLUSTER_TOKEN:
            if cluster_vectors is None:
                raise ValueError("cluster_token fusion needs cluster vectors")
            return embed_clusters(cluster_vectors, self.G)
        if self.mode is FusionMode.CLASS_TOKEN:
            return self.class_token.expand(batch, -1)
        return None

    def forward(self, patch_tokens: torch.Tensor, cluster_vectors: torch.Tensor | None = None) -> torch.Tensor:
        return fuse(patch_tokens, self.token(cluster_vectors, patch_tokens.shape[0]))
