"""Dense pseudo labels from patch predictions, dense-CRF refinement, and mIoU scoring."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from pcc.errors import ShapeError
from pcc.fusion import grid_side

IGNORE_INDEX = 255


def upsample_predictions(Z, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear (align_corners=False) resize of ``(s, C)`` patch predictions to ``(h, w, C)``."""
    Z = torch.as_tensor(Z)
    if Z.ndim != 2:
        raise ShapeError(f"expected (s, C) predictions, got {tuple(Z.shape)}")
    g = grid_side(Z.shape[0])
    grid = Z.T.reshape(1, Z.shape[1], g, g)
    dense = F.interpolate(grid, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return dense[0].permute(1, 2, 0).detach().cpu().numpy()


def argmax_labels(dense: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(dense), axis=-1).astype(np.int64)


@dataclass
class CRFConfig:
    iterations: int = 5
    spatial_weight: float = 3.0
    bilateral_weight: float = 5.0
    spatial_sigma: float = 3.0
    bilateral_sigma_xy: float = 49.0
    bilateral_sigma_rgb: float = 13.0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.spatial_weight < 0 or self.bilateral_weight < 0:
            raise ValueError("pairwise weights must be >= 0")
        if min(self.spatial_sigma, self.bilateral_sigma_xy, self.bilateral_sigma_rgb) <= 0:
            raise ValueError("sigmas must be > 0")


def _kernel_rows(pos, rgb, rows: slice, cfg: CRFConfig) -> np.ndarray:
    d_xy = ((pos[rows, None, :] - pos[None, :, :]) ** 2).sum(-1)
    d_rgb = ((rgb[rows, None, :] - rgb[None, :, :]) ** 2).sum(-1)
    k = cfg.spatial_weight * np.exp(-d_xy / (2 * cfg.spatial_sigma**2))
    k += cfg.bilateral_weight * np.exp(
        -d_xy / (2 * cfg.bilateral_sigma_xy**2) - d_rgb / (2 * cfg.bilateral_sigma_rgb**2)
    )
    idx = np.arange(rows.start, rows.stop)
    k[idx - rows.start, idx] = 0.0  # no self-message
    return k


def crf_refine(dense: np.ndarray, image: np.ndarray, cfg: CRFConfig | None = None, chunk: int = 1024) -> np.ndarray:
    """Mean-field inference for a fully connected CRF with Potts compatibility.

    Unary energy is ``-log(dense)``; pairwise kernels are a Gaussian on pixel
    position plus a bilateral Gaussian on position and colour. ``image`` is
    ``(h, w, 3)`` in [0, 1] and is scaled to 0..255 for the colour kernel.
    The pairwise sum is computed exactly (no lattice approximation), in row
    chunks to bound memory.
    """
    cfg = cfg or CRFConfig()
    dense = np.asarray(dense, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    h, w, C = dense.shape
    if image.shape[:2] != (h, w):
        raise ShapeError(f"image {image.shape[:2]} does not match predictions {(h, w)}")
    if cfg.spatial_weight == 0 and cfg.bilateral_weight == 0:
        return dense.copy()

    n = h * w
    ys, xs = np.mgrid[0:h, 0:w]
    pos = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    rgb = image.reshape(n, -1) * 255.0
    unary = -np.log(np.clip(dense.reshape(n, C), 1e-12, None))

    kernels = None
    if n * n <= 4096 * 4096:
        kernels = [_kernel_rows(pos, rgb, slice(s, min(s + chunk, n)), cfg) for s in range(0, n, chunk)]
    Q = _softmax(-unary)
    for _ in range(cfg.iterations):
        msg = np.empty_like(Q)
        for ci, start in enumerate(range(0, n, chunk)):
            rows = slice(start, min(start + chunk, n))
            K = kernels[ci] if kernels is not None else _kernel_rows(pos, rgb, rows, cfg)
            msg[rows] = K @ Q
        # Potts: penalty for label l collects messages of every other label
        pairwise = msg.sum(axis=1, keepdims=True) - msg
        Q = _softmax(-unary - pairwise)
    return Q.reshape(h, w, C)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class IoUReport:
    per_class_iou: np.ndarray  # NaN marks a class absent from both maps
    mean_iou: float
    confusion: np.ndarray  # rows = ground truth, cols = prediction
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        names = self.class_names or [str(i) for i in range(len(self.per_class_iou))]
        return {
            "mean_iou": self.mean_iou,
            "per_class_iou": {
                n: (None if np.isnan(v) else float(v)) for n, v in zip(names, self.per_class_iou)
            },
            "confusion": self.confusion.tolist(),
        }

    def table(self) -> str:
        names = self.class_names or [str(i) for i in range(len(self.per_class_iou))]
        width = max(len("mean"), *(len(n) for n in names))
        lines = [f"{'class':<{width}}  IoU"]
        for n, v in zip(names, self.per_class_iou):
            lines.append(f"{n:<{width}}  {'  n/a' if np.isnan(v) else f'{v:.4f}'}")
        lines.append(f"{'mean':<{width}}  {self.mean_iou:.4f}")
        return "\n".join(lines)

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        path.with_suffix(".txt").write_text(self.table() + "\n", encoding="utf-8")


def confusion_matrix(pred, gt, num_classes: int, ignore_index: int | None = IGNORE_INDEX) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ShapeError("prediction and ground truth differ in size")
    keep = np.ones_like(gt, dtype=bool) if ignore_index is None else gt != ignore_index
    pred, gt = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if gt.size and (gt.max() >= num_classes or pred.max() >= num_classes or min(gt.min(), pred.min()) < 0):
        raise ShapeError(f"label outside [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def report_from_confusion(conf: np.ndarray, class_names: list[str] | None = None) -> IoUReport:
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(0) + conf.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    defined = iou[~np.isnan(iou)]
    mean = float(defined.mean()) if defined.size else float("nan")
    return IoUReport(iou, mean, conf, list(class_names or []))


def compute_miou(pred, gt, num_classes: int, ignore_index: int | None = IGNORE_INDEX, class_names=None) -> IoUReport:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return report_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_index), class_names)


def voc_palette() -> list[int]:
    """Standard VOC colour map: bit-interleaved RGB for each index."""
    palette = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette.extend((r, g, b))
    return palette


def save_label_map(labels: np.ndarray, path: str | os.PathLike) -> None:
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    img.putpalette(voc_palette())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def load_label_map(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "P" and img.mode != "L":
            raise ShapeError(f"{path} is not a single-channel label image")
        return np.array(img, dtype=np.int64)
