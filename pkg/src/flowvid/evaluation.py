"""Validation cross entropy per frame and the four-variant ablation."""

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .training import TrainConfig, Trainer, check_compatible, config_hash, restore
from .video import VARIANTS, ModelConfig, VideoModel, dequantize, nll_per_dim

log = logging.getLogger(__name__)

EVAL_COLUMNS = ("variant", "ce_head_npd", "ce_tail_npd", "n_videos", "config_hash", "split")
ABLATION_COLUMNS = ("variant", "ce_head", "ce_tail", "n_videos", "config_hash")


@dataclass
class EvalReport:
    variant: str
    ce_head_npd: float
    ce_tail_npd: float
    n_videos: int
    config_hash: str
    split: str = "val"

    def row(self):
        return asdict(self)


def frame_cross_entropy(model, videos, seed=0, batch_size=8, max_frames=None):
    """Mean NLL (nats/dim, 8-bit data) of the first frame and of frames 1..T-1.

    Dequantisation noise is seeded by ``(seed, video_id)`` so repeated
    evaluations agree exactly.
    """
    if not videos:
        raise ValueError("no videos to evaluate")
    model.eval()
    d = model.frame_dim
    head_nll, tail_nll = [], []
    with ad.no_grad():
        for start in range(0, len(videos), batch_size):
            chunk = videos[start:start + batch_size]
            frames = np.stack([v.frames[:max_frames] if max_frames else v.frames for v in chunk])
            x = np.stack([dequantize(f, np.random.default_rng([seed, v.video_id, 2]))
                          for f, v in zip(frames, chunk)]).astype(ad.default_dtype())
            clean = dequantize(frames).astype(ad.default_dtype())
            labels = np.array([v.label for v in chunk])
            head, tail = model.frame_log_probs(x, clean, labels)
            head_nll.append(nll_per_dim(head.data, d))
            if tail is not None:
                tail_nll.append(nll_per_dim(tail.data, d))
    ce_head = float(np.mean(np.concatenate(head_nll)))
    ce_tail = float(np.mean(np.concatenate(tail_nll))) if tail_nll else float("nan")
    return ce_head, ce_tail


def evaluate_checkpoint(path, corpus, split="val", seed=0):
    model, meta = restore(path)
    check_compatible(meta, corpus.hash)
    videos = corpus.load(split=split)
    max_frames = meta.get("train", {}).get("max_frames")
    ce_head, ce_tail = frame_cross_entropy(model, videos, seed=seed, max_frames=max_frames)
    return EvalReport(model.variant, ce_head, ce_tail, len(videos),
                      config_hash(model.config, corpus.hash), split)


def append_csv(path, columns, row):
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        if fresh:
            writer.writeheader()
        writer.writerow({k: _cell(row[k]) for k in columns})


def _cell(v):
    return repr(v) if isinstance(v, float) else v


def train_variant(variant, corpus, out_dir, model_overrides=None, train_config=None,
                  trained_unconditioned=False, videos=None, record_timing=True):
    """Train one variant on the corpus train split; returns the final checkpoint path.

    The ``init`` variant stays untrained (ActNorm initialisation only) unless
    ``trained_unconditioned`` is set.
    """
    train_config = train_config or TrainConfig()
    cfg = dict(model_overrides or {})
    cfg.update(variant=variant, label_count=corpus.spec.label_count)
    model = VideoModel(ModelConfig.from_dict(cfg))
    steps = train_config.max_steps
    if variant == "init" and not trained_unconditioned:
        steps = 0
    videos = videos if videos is not None else corpus.load(split="train")
    trainer = Trainer(model, videos, train_config, out_dir, corpus.hash, record_timing=record_timing)
    trainer.run(steps)
    path = os.path.join(out_dir, "model.nfvg")
    trainer.save_final(path)
    if trainer.events:
        with open(os.path.join(out_dir, "events.jsonl"), "w") as fh:
            for event in trainer.events:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
    if model.embeddings is not None:
        with open(os.path.join(out_dir, "lemb_grad_norm.csv"), "w", newline="") as fh:
            fh.write("step,lemb_grad_norm\n")
            for row in trainer.history:
                fh.write(f"{row['step']},{row['lemb_grad_norm']!r}\n")
    return path, trainer


def run_ablation(corpus, out_dir, steps, model_overrides=None, train_config=None,
                 trained_unconditioned=False, seed=0, record_timing=True):
    """Train and evaluate all four variants under one seed and step budget.

    Writes ``ablation.csv`` (Table-1 shaped) and ``findings.json``; returns the
    list of :class:`EvalReport` in variant order.
    """
    os.makedirs(out_dir, exist_ok=True)
    base = train_config or TrainConfig()
    base = TrainConfig(**{**base.to_dict(), "max_steps": steps, "seed": seed})
    train_videos = corpus.load(split="train")
    val_videos = corpus.load(split="val")
    reports = []
    for variant in VARIANTS:
        vdir = os.path.join(out_dir, variant)
        try:
            path, _ = train_variant(variant, corpus, vdir, model_overrides, base,
                                    trained_unconditioned, train_videos, record_timing)
            model, _ = restore(path)
            ce_head, ce_tail = frame_cross_entropy(model, val_videos, seed=seed,
                                                   max_frames=base.max_frames)
        except Exception as exc:
            raise RuntimeError(f"ablation variant {variant!r} failed: {exc}") from exc
        report = EvalReport(variant, ce_head, ce_tail, len(val_videos),
                            config_hash(model.config, corpus.hash))
        log.info("%s: ce_head=%.4f ce_tail=%.4f", variant, ce_head, ce_tail)
        reports.append(report)
    table = os.path.join(out_dir, "ablation.csv")
    if os.path.exists(table):
        os.remove(table)
    for r in reports:
        append_csv(table, ABLATION_COLUMNS, {"variant": r.variant, "ce_head": r.ce_head_npd,
                                             "ce_tail": r.ce_tail_npd, "n_videos": r.n_videos,
                                             "config_hash": r.config_hash})
    by = {r.variant: r for r in reports}
    diff = by["state"].ce_tail_npd - by["prev_frame"].ce_tail_npd
    findings = {"state_minus_prev_frame_tail": diff,
                "state_better_than_prev_frame": bool(diff < 0),
                "steps": steps, "seed": seed, "n_val": len(val_videos)}
    with open(os.path.join(out_dir, "findings.json"), "w") as fh:
        json.dump(findings, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("state - prev_frame tail CE: %+.4f nats/dim", diff)
    return reports
