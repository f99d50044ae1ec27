"""Patch classifier, top-k pooling to image scores, and the multi-label BCE loss.

Also hosts :class:`PCCModel`, the full chain from pixels to patch predictions.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from pcc.errors import ShapeError
from pcc.fusion import ClusterFusion, FusionMode, HVBiLSTM
from pcc.vit import EncoderConfig, ViTEncoder, init_params

EPS = 1e-7


def classify_patches(tokens: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of ``tokens @ W``; ``(…, s, D) x (D, C) -> (…, s, C)``."""
    if tokens.shape[-1] != W.shape[0]:
        raise ShapeError(f"token dim {tokens.shape[-1]} != classifier input {W.shape[0]}")
    return torch.softmax(tokens @ W, dim=-1)


def topk_pool(Z: torch.Tensor, k: int) -> torch.Tensor:
    """Mean of the ``k`` largest patch scores per class; ``(…, s, C) -> (…, C)``.

    Ties are broken toward the lower patch index, so gradients go to those entries.
    """
    s = Z.shape[-2]
    if not 1 <= k <= s:
        raise ShapeError(f"k={k} outside [1, {s}]")
    ranked, _ = torch.sort(Z, dim=-2, descending=True, stable=True)
    return ranked.narrow(-2, 0, k).mean(dim=-2)


def mce_loss(p: torch.Tensor, y: torch.Tensor, include_background: bool = True, eps: float = EPS) -> torch.Tensor:
    """Class-averaged binary cross-entropy; batched inputs are averaged over images too.

    With ``include_background=False`` column 0 is left out of the average.
    """
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {tuple(p.shape)} != label shape {tuple(y.shape)}")
    if not include_background:
        p, y = p[..., 1:], y[..., 1:]
    p = p.clamp(eps, 1 - eps)
    y = y.to(p.dtype)
    bce = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
    return bce.mean()


def image_label_vector(labels, class_names: list[str]) -> torch.Tensor:
    """Binary target over ``class_names`` (index 0 = background, always on)."""
    y = torch.zeros(len(class_names))
    y[0] = 1.0
    index = {c: i for i, c in enumerate(class_names)}
    for name in labels:
        y[index[name]] = 1.0
    return y


class PCCModel(nn.Module):
    """Encoder -> cluster fusion -> HV-BiLSTM -> patch classifier."""

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        num_classes: int,
        fusion_mode: FusionMode | str = FusionMode.CLUSTER_TOKEN,
        num_clusters: int = 0,
        cluster_dim: int = 32,
        refiner_hidden: int | None = None,
        refiner_residual: bool = True,
    ):
        super().__init__()
        self.encoder = ViTEncoder(encoder_cfg)
        self.fusion = ClusterFusion(fusion_mode, num_clusters, cluster_dim, seed=encoder_cfg.seed + 1)
        dim = encoder_cfg.embed_dim + self.fusion.out_extra
        self.refiner = HVBiLSTM(dim, refiner_hidden, refiner_residual)
        self.classifier = nn.Linear(dim, num_classes, bias=False)
        init_params(self.refiner, encoder_cfg.seed + 2)
        init_params(self.classifier, encoder_cfg.seed + 3)

    @property
    def W(self) -> torch.Tensor:
        return self.classifier.weight.T

    def forward(self, images: torch.Tensor, cluster_vectors: torch.Tensor | None = None) -> torch.Tensor:
        tokens = self.encoder(images)
        fused = self.fusion(tokens, cluster_vectors)
        refined = self.refiner(fused)
        return classify_patches(refined, self.W)


def forward_loss(
    model: PCCModel,
    images: torch.Tensor,
    targets: torch.Tensor,
    cluster_vectors: torch.Tensor | None,
    k: int,
    include_background: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(loss, Z)`` for a batch."""
    Z = model(images, cluster_vectors)
    p = topk_pool(Z, k)
    return mce_loss(p, targets, include_background), Z
