"""Training loop, checkpointing, and patch-prediction inference."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from pcc.clusters import ClusterAssignment, cluster_vector
from pcc.config import RunConfig
from pcc.data import DatasetManifest, load_split
from pcc.errors import ConfigError, DivergenceError
from pcc.fusion import FusionMode
from pcc.head import PCCModel, forward_loss, image_label_vector

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "last.pt"
METRICS_NAME = "metrics.jsonl"


@dataclass
class PreparedData:
    images: torch.Tensor  # (N, 3, n, n)
    targets: torch.Tensor  # (N, C)
    cluster_vectors: torch.Tensor | None  # (N, L)
    class_names: list[str]  # background first


def build_model(cfg: RunConfig, num_classes: int, assignment: ClusterAssignment | None) -> PCCModel:
    mode = FusionMode(cfg.fusion_mode)
    if mode is FusionMode.CLUSTER_TOKEN and assignment is None:
        raise ConfigError("fusion_mode=cluster_token needs a cluster assignment")
    num_clusters = assignment.num_clusters if mode is FusionMode.CLUSTER_TOKEN else 0
    enc = replace(cfg.encoder, seed=cfg.seed)
    return PCCModel(enc, num_classes, mode, num_clusters, cfg.cluster_dim, refiner_residual=cfg.refiner_residual)


def prepare(cfg: RunConfig, manifest: DatasetManifest, assignment: ClusterAssignment | None) -> PreparedData:
    """Load images and image-level targets. Dense masks are not touched."""
    class_names = manifest.all_classes
    pixels = load_split(manifest, cfg.encoder.image_side)
    images = torch.from_numpy(pixels).permute(0, 3, 1, 2).contiguous()
    targets = torch.stack([image_label_vector(e.labels, class_names) for e in manifest.entries])
    vectors = None
    if FusionMode(cfg.fusion_mode) is FusionMode.CLUSTER_TOKEN:
        vectors = torch.from_numpy(
            np.stack([cluster_vector(e.labels, assignment) for e in manifest.entries])
        ).float()
    return PreparedData(images, targets, vectors, class_names)


def _make_optimizer(cfg: RunConfig, model: PCCModel) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.optimizer.lr_at(0), weight_decay=cfg.optimizer.weight_decay)


def save_checkpoint(path: Path, cfg: RunConfig, model, optimizer, epoch: int, assignment, class_names) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(
        {
            "config": cfg.to_dict(),
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "epoch": epoch,
            "assignment": assignment.to_dict() if assignment is not None else None,
            "class_names": class_names,
        },
        tmp,
    )
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[RunConfig, PCCModel, dict]:
    """Rebuild the model stored in a checkpoint. Returns ``(cfg, model, raw checkpoint)``."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = RunConfig.from_dict(ckpt["config"])
    assignment = ClusterAssignment.from_dict(ckpt["assignment"]) if ckpt["assignment"] else None
    model = build_model(cfg, len(ckpt["class_names"]), assignment)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return cfg, model, ckpt


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_path: Path
    epoch_losses: list[float]
    model: PCCModel


def train(
    cfg: RunConfig,
    manifest: DatasetManifest,
    assignment: ClusterAssignment | None = None,
    resume: bool = True,
    data: PreparedData | None = None,
    epoch_callback=None,
) -> TrainResult:
    """Mini-batch Adam on the mean MCE loss; checkpoints after every epoch.

    With ``resume=True`` an existing checkpoint in ``cfg.paths.checkpoints``
    is picked up and training continues from its epoch. ``epoch_callback``
    is called as ``fn(epoch, model, record)`` after each epoch; the epoch
    record it receives may be extended in place before it is logged.
    """
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    data = data or prepare(cfg, manifest, assignment)
    model = build_model(cfg, len(data.class_names), assignment)
    optimizer = _make_optimizer(cfg, model)

    ckpt_dir = Path(cfg.paths.checkpoints)
    ckpt_path = ckpt_dir / CHECKPOINT_NAME
    metrics_path = ckpt_dir / METRICS_NAME
    start_epoch = 0
    if resume and ckpt_path.exists():
        ckpt = torch.load(ckpt_path, map_location="cpu", weights_only=False)
        model.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        start_epoch = int(ckpt["epoch"])
        logger.info("resuming from %s at epoch %d", ckpt_path, start_epoch)
    elif metrics_path.exists():
        metrics_path.unlink()
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    n = data.images.shape[0]
    epoch_losses: list[float] = []
    with open(metrics_path, "a", encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.max_epochs):
            lr = cfg.optimizer.lr_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            order = torch.randperm(n, generator=torch.Generator().manual_seed(cfg.seed * 100003 + epoch))
            t0 = time.perf_counter()
            total, seen = 0.0, 0
            for step, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                vecs = data.cluster_vectors[idx] if data.cluster_vectors is not None else None
                loss, _ = forward_loss(model, data.images[idx], data.targets[idx], vecs, cfg.topk, cfg.include_background)
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                seen += len(idx)
                log.write(json.dumps({"kind": "step", "epoch": epoch, "step": step, "loss": loss.item(), "lr": lr}) + "\n")
            mean_loss = total / seen
            epoch_losses.append(mean_loss)
            save_checkpoint(ckpt_path, cfg, model, optimizer, epoch + 1, assignment, data.class_names)
            record = {"kind": "epoch", "epoch": epoch, "loss": mean_loss, "lr": lr, "seconds": time.perf_counter() - t0}
            if epoch_callback is not None:
                epoch_callback(epoch, model, record)
            log.write(json.dumps(record) + "\n")
            log.flush()
            logger.info("epoch %d loss %.4f lr %.0e", epoch, mean_loss, lr)
    model.eval()
    return TrainResult(ckpt_path, metrics_path, epoch_losses, model)


@torch.no_grad()
def predict_patches(model: PCCModel, images: torch.Tensor, cluster_vectors: torch.Tensor | None, batch_size: int = 32) -> torch.Tensor:
    """Patch predictions ``(N, s, C)`` in eval mode."""
    model.eval()
    out = []
    for start in range(0, images.shape[0], batch_size):
        vecs = cluster_vectors[start:start + batch_size] if cluster_vectors is not None else None
        out.append(model(images[start:start + batch_size], vecs))
    return torch.cat(out)
