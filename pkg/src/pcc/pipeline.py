"""End-to-end orchestration: cluster -> train -> pseudo labels -> (CRF) -> mIoU."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from pcc.clusters import ClusterAssignment, PromptTemplates, StopCondition, generate_clusters
from pcc.config import RunConfig
from pcc.data import DatasetManifest, ingest_voc_style, open_mask
from pcc.errors import ConfigError
from pcc.fusion import FusionMode
from pcc.llm import LLMBackend, LLMClient, MockScript, ResponseCache
from pcc.pseudo import (
    CRFConfig,
    IoUReport,
    argmax_labels,
    confusion_matrix,
    crf_refine,
    load_label_map,
    report_from_confusion,
    save_label_map,
    upsample_predictions,
)
from pcc.train import PreparedData, load_checkpoint, predict_patches, prepare, train

logger = logging.getLogger(__name__)


def make_client(cluster_cfg) -> LLMClient:
    if cluster_cfg.backend == "mock":
        if not cluster_cfg.mock_script:
            raise ConfigError("mock backend needs cluster.mock_script")
        return LLMClient(LLMBackend(), script=MockScript.load(cluster_cfg.mock_script))
    if cluster_cfg.backend == "live":
        return LLMClient(
            LLMBackend.from_env(model_id=cluster_cfg.model_id),
            cache=ResponseCache(cluster_cfg.cache_path),
        )
    raise ConfigError(f"unknown LLM backend {cluster_cfg.backend!r}")


def run_clustering(categories, cluster_cfg, out_path=None) -> ClusterAssignment:
    client = make_client(cluster_cfg)
    templates = PromptTemplates.from_files(cluster_cfg.gen_template, cluster_cfg.refine_template)
    stop = StopCondition(cluster_cfg.stability_window, cluster_cfg.max_iterations)
    z = generate_clusters(categories, client, templates, stop)
    if out_path is not None:
        z.save(out_path)
    return z


def resolve_assignment(cfg: RunConfig, manifest: DatasetManifest) -> ClusterAssignment | None:
    """Load (or generate, if a backend is configured) the cluster map. Fails before any training."""
    if FusionMode(cfg.fusion_mode) is not FusionMode.CLUSTER_TOKEN:
        return None
    path = Path(cfg.paths.cluster_map) if cfg.paths.cluster_map else None
    if path is not None and path.exists():
        z = ClusterAssignment.load(path)
    elif cfg.cluster.backend:
        z = run_clustering(manifest.class_names, cfg.cluster, path)
    else:
        raise ConfigError(
            f"fusion_mode=cluster_token but cluster map {path} is missing and no cluster backend is configured"
        )
    missing = set(manifest.class_names) - set(z.mapping)
    if missing:
        raise ConfigError(f"cluster map lacks categories {sorted(missing)}")
    return z


@dataclass
class PseudoResult:
    label_maps: dict[str, np.ndarray]
    output_dir: Path | None


def generate_pseudo_labels(
    model,
    manifest: DatasetManifest,
    data: PreparedData,
    crf: CRFConfig | None = None,
    output_dir: str | Path | None = None,
) -> PseudoResult:
    """Interpolate patch predictions to image size, optionally CRF-refine, then argmax."""
    Z = predict_patches(model, data.images, data.cluster_vectors)
    out = Path(output_dir) if output_dir is not None else None
    maps = {}
    for i, entry in enumerate(manifest.entries):
        h, w = data.images.shape[2:]
        dense = upsample_predictions(Z[i], h, w)
        if crf is not None:
            image = data.images[i].permute(1, 2, 0).numpy()
            dense = crf_refine(dense, image, crf)
        labels = argmax_labels(dense)
        maps[entry.identifier] = labels
        if out is not None:
            save_label_map(labels, out / f"{entry.identifier}.png")
    return PseudoResult(maps, out)


def evaluate_maps(label_maps: dict[str, np.ndarray], manifest: DatasetManifest, side: int | None = None) -> IoUReport:
    """Dataset-level mIoU from a confusion matrix accumulated over all images."""
    C = len(manifest.all_classes)
    conf = np.zeros((C, C), dtype=np.int64)
    for entry in manifest.entries:
        if entry.mask_path is None:
            raise ConfigError(f"no ground-truth mask for {entry.identifier}")
        gt = open_mask(entry.mask_path)
        pred = label_maps[entry.identifier]
        if gt.shape != pred.shape:
            gt = _resize_nearest(gt, pred.shape)
        conf += confusion_matrix(pred, gt, C)
    return report_from_confusion(conf, manifest.all_classes)


def _resize_nearest(labels: np.ndarray, shape) -> np.ndarray:
    from PIL import Image

    img = Image.fromarray(labels.astype(np.uint8), mode="L").resize((shape[1], shape[0]), Image.NEAREST)
    return np.asarray(img, dtype=np.int64)


def evaluate_dirs(pred_dir, gt_dir, num_classes: int, class_names=None) -> IoUReport:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    preds = sorted(pred_dir.glob("*.png"))
    if not preds:
        raise ConfigError(f"no prediction images in {pred_dir}")
    for p in preds:
        gt_path = gt_dir / p.name
        if not gt_path.exists():
            raise ConfigError(f"missing ground truth {gt_path}")
        pred = load_label_map(p)
        gt = open_mask(gt_path)
        if gt.shape != pred.shape:
            gt = _resize_nearest(gt, pred.shape)
        conf += confusion_matrix(pred, gt, num_classes)
    return report_from_confusion(conf, class_names)


@dataclass
class RunReport:
    fusion_mode: str
    seed: int
    report: IoUReport
    crf_report: IoUReport | None
    timings: dict[str, float] = field(default_factory=dict)
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def final(self) -> IoUReport:
        return self.crf_report if self.crf_report is not None else self.report

    def to_dict(self) -> dict:
        return {
            "fusion_mode": self.fusion_mode,
            "seed": self.seed,
            "miou": self.report.to_dict(),
            "miou_crf": self.crf_report.to_dict() if self.crf_report is not None else None,
            "timings": self.timings,
            "epoch_losses": self.epoch_losses,
        }


def run_pipeline(cfg: RunConfig, manifest: DatasetManifest | None = None, resume: bool = True) -> RunReport:
    timings: dict[str, float] = {}
    t = time.perf_counter()
    manifest = manifest or ingest_voc_style(cfg.paths.dataset, cfg.split)
    assignment = resolve_assignment(cfg, manifest)
    timings["cluster"] = time.perf_counter() - t

    t = time.perf_counter()
    data = prepare(cfg, manifest, assignment)
    callback = None
    if cfg.log_epoch_miou and manifest.has_masks:
        # evaluation only: masks are read after each epoch's updates, never for gradients
        def callback(epoch, model, record):
            maps = generate_pseudo_labels(model, manifest, data).label_maps
            record["miou"] = evaluate_maps(maps, manifest).mean_iou
            model.train()

    result = train(cfg, manifest, assignment, resume=resume, data=data, epoch_callback=callback)
    timings["train"] = time.perf_counter() - t

    out = Path(cfg.paths.outputs)
    t = time.perf_counter()
    pseudo = generate_pseudo_labels(result.model, manifest, data, None, out / "pseudo")
    timings["pseudo"] = time.perf_counter() - t
    crf_pseudo = None
    if cfg.crf.enabled:
        t = time.perf_counter()
        crf_pseudo = generate_pseudo_labels(result.model, manifest, data, cfg.crf.params, out / "pseudo_crf")
        timings["crf"] = time.perf_counter() - t

    t = time.perf_counter()
    report = evaluate_maps(pseudo.label_maps, manifest)
    crf_report = evaluate_maps(crf_pseudo.label_maps, manifest) if crf_pseudo else None
    timings["eval"] = time.perf_counter() - t

    run = RunReport(cfg.fusion_mode, cfg.seed, report, crf_report, timings, result.epoch_losses)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(run.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(_report_text(run) + "\n", encoding="utf-8")
    logger.info("mIoU %.4f (%s)", run.final.mean_iou, cfg.fusion_mode)
    return run


def _report_text(run: RunReport) -> str:
    parts = [f"fusion_mode={run.fusion_mode} seed={run.seed}", run.report.table()]
    if run.crf_report is not None:
        parts += ["", "with CRF:", run.crf_report.table()]
    parts += ["", "timings (s): " + ", ".join(f"{k}={v:.1f}" for k, v in run.timings.items())]
    return "\n".join(parts)


def run_ablation(cfg: RunConfig, modes=("none", "cluster_token"), seeds=None, manifest=None) -> dict[tuple[str, int], RunReport]:
    """Run each fusion mode for each seed in its own subdirectory and write a comparison table."""
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    manifest = manifest or ingest_voc_style(cfg.paths.dataset, cfg.split)
    base_ckpt, base_out = Path(cfg.paths.checkpoints), Path(cfg.paths.outputs)
    for mode in modes:
        resolve_assignment(replace(cfg, fusion_mode=mode), manifest)
    reports = {}
    for mode in modes:
        for seed in seeds:
            tag = f"{mode}_seed{seed}"
            paths = replace(cfg.paths, checkpoints=str(base_ckpt / tag), outputs=str(base_out / tag))
            reports[(mode, seed)] = run_pipeline(replace(cfg, fusion_mode=mode, seed=seed, paths=paths), manifest)
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "ablation.txt").write_text(ablation_table(reports) + "\n", encoding="utf-8")
    (base_out / "ablation.json").write_text(
        json.dumps({f"{m}/{s}": r.final.mean_iou for (m, s), r in reports.items()}, indent=2) + "\n",
        encoding="utf-8",
    )
    return reports


def ablation_table(reports: dict[tuple[str, int], RunReport]) -> str:
    modes = list(dict.fromkeys(m for m, _ in reports))
    seeds = list(dict.fromkeys(s for _, s in reports))
    header = f"{'fusion_mode':<14}" + "".join(f"  seed {s:<4}" for s in seeds) + "    mean"
    lines = [header]
    for m in modes:
        vals = [reports[(m, s)].final.mean_iou for s in seeds]
        lines.append(f"{m:<14}" + "".join(f"  {v:9.4f}" for v in vals) + f"  {np.mean(vals):6.4f}")
    return "\n".join(lines)


def pseudo_from_checkpoint(checkpoint, split: str = "train", crf: bool = False, output_dir=None, dataset=None) -> PseudoResult:
    cfg, model, ckpt = load_checkpoint(checkpoint)
    manifest = ingest_voc_style(dataset or cfg.paths.dataset, split)
    assignment = ClusterAssignment.from_dict(ckpt["assignment"]) if ckpt["assignment"] else None
    data = prepare(cfg, manifest, assignment)
    out = output_dir or Path(cfg.paths.outputs) / ("pseudo_crf" if crf else "pseudo")
    return generate_pseudo_labels(model, manifest, data, cfg.crf.params if crf else None, out)
