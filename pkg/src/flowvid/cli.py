"""Command-line entry point: ``flowvid {make-data,train,eval,ablate,sample}``."""

import argparse
import json
import logging
import os
import sys

from . import data
from .data import Corpus, CorpusSpec
from .errors import CompatibilityError, FormatError, ShapeError, UsageError
from .evaluation import (EVAL_COLUMNS, append_csv, evaluate_checkpoint, run_ablation,
                         train_variant)
from .training import TrainConfig, restore
from .video import VARIANTS

log = logging.getLogger("flowvid")


def load_config(path):
    """``{"model": {...}, "train": {...}}`` from a JSON file (both optional)."""
    if not path:
        return {}, {}
    with open(path) as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ValueError(f"config {path}: unknown sections {sorted(unknown)}")
    return cfg.get("model", {}), cfg.get("train", {})


def _train_config(train_cfg, args):
    cfg = TrainConfig(**train_cfg)
    for flag in ("max_steps", "lr", "batch_size", "seed", "clip", "checkpoint_interval",
                 "max_frames", "nan_at_batch"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    return cfg.validate()


def cmd_make_data(args):
    spec = CorpusSpec(args.videos, args.frames, args.size, args.labels, args.seed, args.train_fraction)
    rows = data.generate_corpus(spec, args.out)
    n_val = sum(r["split"] == "val" for r in rows)
    print(f"wrote {len(rows)} videos ({len(rows) - n_val} train, {n_val} val) to {args.out}")


def cmd_train(args):
    corpus = Corpus(args.data)
    model_cfg, train_cfg = load_config(args.config)
    cfg = _train_config(train_cfg, args)
    videos = None
    if args.overfit_video is not None:
        videos = corpus.load(ids=[args.overfit_video])
        if not videos:
            raise UsageError(f"video {args.overfit_video} is not in {args.data}")
    try:
        path, trainer = train_variant(args.variant, corpus, args.out, model_cfg, cfg,
                                      trained_unconditioned=True, videos=videos,
                                      record_timing=not args.no_timing)
    except ShapeError as exc:
        raise UsageError(f"model does not fit the corpus ({corpus.spec.size}x{corpus.spec.size} frames): "
                         f"{exc}") from exc
    last = trainer.history[-1] if trainer.history else None
    summary = f"loss_npd={last['loss_npd']:.4f}" if last else "untrained"
    print(f"{args.variant}: {trainer.step} steps, {trainer.rollbacks} rollbacks, {summary}; wrote {path}")


def cmd_eval(args):
    corpus = Corpus(args.data)
    report = evaluate_checkpoint(args.checkpoint, corpus, split=args.split, seed=args.seed)
    out = args.report or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval_report.csv")
    append_csv(out, EVAL_COLUMNS, report.row())
    print(",".join(EVAL_COLUMNS))
    print(",".join(str(report.row()[c]) for c in EVAL_COLUMNS))


def cmd_ablate(args):
    corpus = Corpus(args.data)
    model_cfg, train_cfg = load_config(args.config)
    cfg = _train_config(train_cfg, args)
    reports = run_ablation(corpus, args.out, args.steps, model_cfg, cfg,
                           trained_unconditioned=args.trained_unconditioned, seed=cfg.seed,
                           record_timing=not args.no_timing)
    print("variant,ce_head,ce_tail")
    for r in reports:
        print(f"{r.variant},{r.ce_head_npd:.6f},{r.ce_tail_npd:.6f}")
    by = {r.variant: r for r in reports}
    print(f"state - prev_frame tail CE: {by['state'].ce_tail_npd - by['prev_frame'].ce_tail_npd:+.6f}")


def cmd_sample(args):
    model, _ = restore(args.checkpoint)
    if args.label is not None and model.embeddings is None:
        raise UsageError(f"--label given but the {model.variant!r} checkpoint has no label embeddings")
    video = model.generate(args.label, args.frames, args.temperature, args.seed)
    os.makedirs(args.out, exist_ok=True)
    data.write_video(os.path.join(args.out, "sample.nfvv"), video)
    data.export_frames(video, args.out)
    print(f"wrote {args.frames} frames to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="flowvid", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="generate the synthetic sprite corpus")
    s.add_argument("--videos", type=int, default=1000)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--labels", default="shape_direction", choices=data.LABEL_SCHEMES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-fraction", type=float, default=0.99)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_data)

    def train_flags(s):
        s.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
        s.add_argument("--lr", type=float)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--clip", type=float)
        s.add_argument("--checkpoint-interval", type=int)
        s.add_argument("--max-frames", type=int, help="train on the first N frames of each video")
        s.add_argument("--no-timing", action="store_true",
                       help="write wall_ms as 0 so metrics files are byte-reproducible")

    s = sub.add_parser("train", help="train one ablation variant")
    s.add_argument("--data", required=True)
    s.add_argument("--variant", required=True, choices=VARIANTS)
    s.add_argument("--out", required=True)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--overfit-video", type=int, help="train on this single video id")
    s.add_argument("--nan-at-batch", type=int, help="testing hook: poison the loss of this batch")
    train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-frame cross entropy of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val", choices=("val", "train"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", help="CSV to append to (default: eval_report.csv next to the checkpoint)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate all four variants")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--trained-unconditioned", action="store_true",
                   help="train the 'init' variant too instead of evaluating it untrained")
    train_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sample", help="generate a video from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--label", type=int)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ShapeError, FormatError, CompatibilityError, ValueError,
            FileNotFoundError, IndexError) as exc:
        print(f"flowvid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
