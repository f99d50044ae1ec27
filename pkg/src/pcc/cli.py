"""``pcc`` command line: cluster, synth, train, pseudo, eval, run."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pcc.clusters import PromptTemplates, StopCondition, generate_clusters
from pcc.config import ClusterConfig, RunConfig
from pcc.data import SyntheticSpec, generate_synthetic, ingest_voc_style
from pcc.errors import PCCError
from pcc.llm import LLMBackend, LLMClient, MockScript, ResponseCache

logger = logging.getLogger("pcc")


def _categories(path: str) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def cmd_cluster(args) -> int:
    if args.backend == "mock":
        if not args.script:
            raise PCCError("--backend mock needs --script")
        client = LLMClient(LLMBackend(), script=MockScript.load(args.script))
    else:
        client = LLMClient(LLMBackend.from_env(model_id=args.model), cache=ResponseCache(args.cache))
    templates = PromptTemplates.from_files(args.gen_template, args.refine_template)
    z = generate_clusters(_categories(args.categories), client, templates, StopCondition(args.window, args.max_iterations))
    z.save(args.out)
    if args.transcript:
        with open(args.transcript, "w", encoding="utf-8") as fh:
            for ex in client.transcript:
                fh.write(json.dumps({"prompt": ex.prompt_text, "response": ex.response_text}) + "\n")
    print(f"{len(z.vocabulary)} clusters after {z.iteration_index} refinements{' (stalled)' if z.stalled else ''} -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec.load(args.spec)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    from pcc.pipeline import resolve_assignment
    from pcc.train import train

    cfg = RunConfig.load(args.config)
    manifest = ingest_voc_style(cfg.paths.dataset, cfg.split)
    assignment = resolve_assignment(cfg, manifest)
    result = train(cfg, manifest, assignment, resume=not args.fresh)
    print(f"final loss {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.4f}; checkpoint {result.checkpoint}")
    return 0


def cmd_pseudo(args) -> int:
    from pcc.pipeline import pseudo_from_checkpoint

    res = pseudo_from_checkpoint(args.checkpoint, args.split, args.crf, args.out, args.dataset)
    print(f"wrote {len(res.label_maps)} pseudo labels to {res.output_dir}")
    return 0


def cmd_eval(args) -> int:
    from pcc.pipeline import evaluate_dirs

    names = _categories(args.classes) if args.classes else None
    if names is not None and names[0] != "background":
        names = ["background", *names]
    n = args.num_classes or (len(names) if names else 21)
    report = evaluate_dirs(args.pred, args.gt, n, names)
    print(report.table())
    if args.out:
        report.save(args.out)
    return 0


def cmd_run(args) -> int:
    from pcc.pipeline import ablation_table, run_ablation, run_pipeline

    cfg = RunConfig.load(args.config)
    if args.ablation:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
        reports = run_ablation(cfg, args.ablation.split(","), seeds)
        print(ablation_table(reports))
    else:
        run = run_pipeline(cfg, resume=not args.fresh)
        print(run.final.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cluster", help="cluster category names with an LLM")
    c.add_argument("--categories", required=True, help="text file, one category per line")
    c.add_argument("--backend", choices=["mock", "live"], default="mock")
    c.add_argument("--script", help="mock script JSON (mock backend)")
    c.add_argument("--model", default=ClusterConfig.model_id)
    c.add_argument("--cache", default=ClusterConfig.cache_path)
    c.add_argument("--gen-template")
    c.add_argument("--refine-template")
    c.add_argument("--window", type=int, default=2)
    c.add_argument("--max-iterations", type=int, default=10)
    c.add_argument("--transcript", help="write prompt/response pairs as JSONL")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    s = sub.add_parser("synth", help="generate a synthetic VOC-style dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", default="data/synth")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the patch classifier")
    t.add_argument("--config", required=True)
    t.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    t.set_defaults(func=cmd_train)

    ps = sub.add_parser("pseudo", help="write pseudo-label maps from a checkpoint")
    ps.add_argument("--checkpoint", required=True)
    ps.add_argument("--split", default="train")
    ps.add_argument("--crf", action="store_true")
    ps.add_argument("--dataset", help="override the dataset root stored in the checkpoint")
    ps.add_argument("--out")
    ps.set_defaults(func=cmd_pseudo)

    e = sub.add_parser("eval", help="mIoU of label maps against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--num-classes", type=int)
    e.add_argument("--classes", help="class names file (foreground, or with background first)")
    e.add_argument("--out", help="write JSON report (and a .txt table beside it)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", help="cluster -> train -> pseudo -> eval")
    r.add_argument("--config", required=True)
    r.add_argument("--ablation", help="comma-separated fusion modes to compare")
    r.add_argument("--seeds", help="comma-separated seeds for --ablation")
    r.add_argument("--fresh", action="store_true")
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PCCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
