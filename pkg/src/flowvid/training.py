"""Maximum-likelihood training: loss, Adam, clipping, NaN rollback, checkpoints."""

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .conditioning import embedding_grad_norm
from .errors import CompatibilityError, FormatError, NumericError, TrainingDivergedError
from .video import LOG_256, ModelConfig, VideoModel, dequantize

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "loss_npd", "loss_head_npd", "loss_tail_npd", "grad_norm_preclip",
                   "lemb_grad_norm", "rollbacks", "wall_ms", "config_hash")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    max_steps: int = 1000
    clip: float = 50.0
    checkpoint_interval: int = 100
    seed: int = 0
    max_frames: Optional[int] = None
    nan_at_batch: Optional[int] = None  # test hook: poison the loss of this batch

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_steps < 0 or self.clip <= 0 \
                or self.checkpoint_interval < 1:
            raise ValueError(f"invalid training configuration: {self}")
        return self

    def to_dict(self):
        return asdict(self)


def config_hash(model_config, corpus_hash=None):
    """Short digest binding a model configuration to the corpus it saw."""
    payload = json.dumps({"model": model_config.to_dict(), "corpus": corpus_hash}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# ------------------------------------------------------------------------ loss

@dataclass
class LossBreakdown:
    total: ad.Tensor  # objective in nats/dim, averaged over frames
    loss_npd: float
    head_npd: float
    tail_npd: float  # NaN when the clip has a single frame
    nll_nats: float  # summed over frames, averaged over the batch


def compute_loss(model, pixels, labels, rng=None):
    """Negative log-likelihood of a batch of uint8 clips ``(N, T, C, H, W)``.

    With ``rng`` the frames are dequantised with uniform noise, otherwise the
    bin centres are used.  Conditioning frames always use the bin centres.
    """
    pixels = np.asarray(pixels)
    n, t = pixels.shape[:2]
    if n == 0:
        raise ValueError("empty batch")
    d = model.frame_dim
    x = dequantize(pixels, rng).astype(ad.default_dtype())
    clean = dequantize(pixels).astype(ad.default_dtype())
    head, tail = model.frame_log_probs(x, clean, labels)
    total_lp = ad.sum(head) if tail is None else ad.add(ad.sum(head), ad.sum(tail))
    objective = ad.add(total_lp * (-1.0 / (n * t * d)), LOG_256)
    head_npd = float(-np.mean(head.data) / d + LOG_256)
    tail_npd = float(-np.mean(tail.data) / d + LOG_256) if tail is not None else float("nan")
    return LossBreakdown(objective, float(objective.data), head_npd, tail_npd,
                         float(-total_lp.data / n))


# --------------------------------------------------------------- optimisation

def global_grad_norm(params):
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                         for p in params if p.grad is not None))


def clip_gradients(params, threshold):
    """Rescale gradients so their global L2 norm is at most ``threshold``.

    Returns the norm before clipping.
    """
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if norm > threshold:
        factor = threshold / norm
        for p in params:
            p.grad = (p.grad * factor).astype(p.grad.dtype)
        post = global_grad_norm(params)
        if post > threshold:
            # float32 rounding can overshoot by an ulp or two
            shrink = threshold / post * (1.0 - 1e-6)
            for p in params:
                p.grad = (p.grad * shrink).astype(p.grad.dtype)
    return norm


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            adam_update(p.data, p.grad, self.m[k], self.v[k], self.lr, b1, b2, self.eps, c1, c2)

    def state_entries(self):
        out = {}
        for k in self.params:
            out[f"optim.m.{k}"] = self.m[k]
        for k in self.params:
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state(self, entries, t):
        for k, p in self.params.items():
            self.m[k] = np.asarray(entries[f"optim.m.{k}"], dtype=p.data.dtype).copy()
            self.v[k] = np.asarray(entries[f"optim.v.{k}"], dtype=p.data.dtype).copy()
        self.t = int(t)


def adam_update(param, grad, m, v, lr, b1, b2, eps, c1, c2):
    """In-place Adam update of one array; ``c1``/``c2`` are the bias corrections."""
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    param -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(param.dtype)


def adam_step(params, grads, moments, lr):
    """Functional wrapper: ``moments`` is a dict with lists ``m``, ``v`` and int ``t``."""
    moments["t"] = moments.get("t", 0) + 1
    t = moments["t"]
    for p, g, m, v in zip(params, grads, moments["m"], moments["v"]):
        adam_update(p, g, m, v, lr, 0.9, 0.999, 1e-8, 1 - 0.9 ** t, 1 - 0.999 ** t)


def nan_guard(loss_value, step, has_checkpoint, grads_finite=True):
    """``"continue"`` for a healthy step, ``"rollback"`` after NaN/Inf."""
    if loss_value is not None and math.isfinite(loss_value) and grads_finite:
        return "continue"
    if not has_checkpoint:
        raise TrainingDivergedError(
            f"non-finite loss at step {step} and no checkpoint to roll back to")
    return "rollback"


# ----------------------------------------------------------------- checkpoints

def model_entries(model):
    entries = {name: p.data for name, p in model.named_parameters()}
    entries.update(dict(model.named_buffers()))
    return entries


def load_model_entries(model, entries):
    missing = []
    for name, p in model.named_parameters():
        if name not in entries:
            missing.append(name)
            continue
        if entries[name].shape != p.shape:
            raise FormatError(f"entries: {name} has shape {entries[name].shape}, model expects {p.shape}")
        p.data = np.asarray(entries[name], dtype=p.data.dtype).copy()
        p.grad = None
    for name, buf in model.named_buffers():
        if name not in entries:
            missing.append(name)
            continue
        buf[...] = entries[name]
    if missing:
        raise FormatError(f"entries: checkpoint lacks {missing[0]} (and {len(missing) - 1} more)")


def save_checkpoint(path, model, optimizer=None, meta=None):
    entries = model_entries(model)
    meta = dict(meta or {})
    meta["model"] = model.config.to_dict()
    if optimizer is not None:
        entries.update(optimizer.state_entries())
        meta["adam_t"] = optimizer.t
    return ckpt.save(path, entries, meta)


def restore(blob_or_path, model=None, optimizer=None):
    """Load parameters (and optimizer moments) from bytes or a path.

    Builds a fresh :class:`VideoModel` from the stored configuration when no
    model is given.  Returns ``(model, meta)``.
    """
    meta, entries = ckpt.decode(blob_or_path) if isinstance(blob_or_path, bytes) \
        else ckpt.load(blob_or_path)
    if model is None:
        model = VideoModel(ModelConfig.from_dict(meta["model"]))
    load_model_entries(model, entries)
    if optimizer is not None and "adam_t" in meta:
        optimizer.load_state(entries, meta["adam_t"])
    return model, meta


def load_checkpoint(path):
    """Model plus ``(optimizer, meta)`` ready to resume training."""
    meta, entries = ckpt.load(path)
    model = VideoModel(ModelConfig.from_dict(meta["model"]))
    load_model_entries(model, entries)
    optimizer = None
    if "adam_t" in meta:
        lr = meta.get("train", {}).get("lr", 1e-4)
        optimizer = Adam(model.named_parameters(), lr=lr)
        optimizer.load_state(entries, meta["adam_t"])
    return model, optimizer, meta


# --------------------------------------------------------------------- trainer

class BatchSchedule:
    """Deterministic batch order: a fresh seeded permutation every epoch."""

    def __init__(self, num_videos, batch_size, seed):
        self.n = num_videos
        self.batch_size = batch_size
        self.seed = seed
        self._perms = {}

    def _perm(self, epoch):
        if epoch not in self._perms:
            self._perms[epoch] = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return self._perms[epoch]

    def indices(self, cursor):
        start = cursor * self.batch_size
        return [int(self._perm(pos // self.n)[pos % self.n])
                for pos in range(start, start + self.batch_size)]


class Trainer:
    """Runs the optimisation loop over a list of :class:`VideoRecord`.

    Writes ``metrics.csv`` and ``checkpoints/step_XXXXXX.nfvg`` into
    ``out_dir`` when one is given; keeps the latest checkpoint in memory for
    NaN rollback either way.
    """

    def __init__(self, model, videos, config, out_dir=None, corpus_hash=None, record_timing=True):
        if not videos:
            raise ValueError("no training videos")
        self.model = model
        self.config = config.validate()
        self.videos = videos
        self.out_dir = out_dir
        self.corpus_hash = corpus_hash
        self.record_timing = record_timing
        self.optimizer = Adam(model.named_parameters(), lr=config.lr)
        self.schedule = BatchSchedule(len(videos), config.batch_size, config.seed)
        self.step = 0
        self.cursor = 0
        self.rollbacks = 0
        self.snapshot = None
        self.snapshot_step = None
        self.history = []
        self.events = []
        self.hash = config_hash(model.config, corpus_hash)
        self._metrics = None
        if out_dir:
            os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

    # -- data

    def batch(self, cursor):
        idx = self.schedule.indices(cursor)
        frames = np.stack([self.videos[i].frames for i in idx])
        if self.config.max_frames:
            frames = frames[:, :self.config.max_frames]
        labels = np.array([self.videos[i].label for i in idx])
        rng = np.random.default_rng([self.config.seed, cursor, 1])
        return frames, labels, rng

    # -- checkpoints

    def meta(self):
        return {"format": "flowvid", "train": self.config.to_dict(), "step": self.step,
                "cursor": self.cursor, "rollbacks": self.rollbacks,
                "corpus_hash": self.corpus_hash, "config_hash": self.hash}

    def checkpoint(self):
        path = None
        if self.out_dir:
            path = os.path.join(self.out_dir, "checkpoints", f"step_{self.step:06d}.nfvg")
        entries = model_entries(self.model)
        entries.update(self.optimizer.state_entries())
        meta = self.meta()
        meta["model"] = self.model.config.to_dict()
        meta["adam_t"] = self.optimizer.t
        self.snapshot = ckpt.save(path, entries, meta) if path else ckpt.encode(entries, meta)
        self.snapshot_step = self.step
        return path

    def rollback(self, reason):
        if self.snapshot is None:
            raise TrainingDivergedError(f"{reason} with no checkpoint to restore")
        _, meta = restore(self.snapshot, self.model, self.optimizer)
        self.step = meta["step"]
        self.rollbacks += 1
        event = {"cursor": self.cursor - 1, "restored_step": self.step, "reason": reason}
        self.events.append(event)
        log.warning("rollback #%d: %s at batch %d; restored step %d and skipped the batch",
                    self.rollbacks, reason, event["cursor"], self.step)

    @classmethod
    def resume(cls, path, videos, out_dir=None, **overrides):
        meta, _ = ckpt.load(path)
        train_cfg = TrainConfig(**{**meta["train"], **overrides})
        model = VideoModel(ModelConfig.from_dict(meta["model"]))
        trainer = cls(model, videos, train_cfg, out_dir, meta.get("corpus_hash"))
        restore(path, model, trainer.optimizer)
        trainer.step = meta["step"]
        trainer.cursor = meta["cursor"]
        trainer.rollbacks = meta["rollbacks"]
        with open(path, "rb") as fh:
            trainer.snapshot = fh.read()
        trainer.snapshot_step = trainer.step
        return trainer

    # -- metrics

    def _open_metrics(self):
        if self.out_dir and self._metrics is None:
            path = os.path.join(self.out_dir, "metrics.csv")
            fresh = not os.path.exists(path) or self.step == 0
            fh = open(path, "w" if fresh else "a", newline="")
            self._metrics = (fh, csv.writer(fh, lineterminator="\n"))
            if fresh:
                self._metrics[1].writerow(METRICS_COLUMNS)

    def _write_row(self, row):
        self.history.append(row)
        if self._metrics:
            fh, writer = self._metrics
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
            fh.flush()

    def close(self):
        if self._metrics:
            self._metrics[0].close()
            self._metrics = None

    # -- loop

    def initialize(self):
        """Data-dependent ActNorm init on the first batch; no optimizer step."""
        uninitialised = [m for m in self.model.modules()
                         if hasattr(m, "is_initialized") and not m.is_initialized]
        if uninitialised:
            frames, labels, rng = self.batch(self.cursor)
            self.model.initialize(dequantize(frames, rng).astype(ad.default_dtype()),
                                  dequantize(frames).astype(ad.default_dtype()), labels)
            log.info("actnorm data-dependent init on batch %d (not counted as a step)", self.cursor)

    def train_step(self):
        """One optimisation step; returns the metrics row or ``None`` after a rollback."""
        cfg = self.config
        cursor = self.cursor
        self.cursor += 1
        frames, labels, rng = self.batch(cursor)
        t0 = time.perf_counter()
        model = self.model
        model.train()
        model.zero_grad()
        loss = None
        try:
            lb = compute_loss(model, frames, labels, rng)
            loss = lb.total
            if cfg.nan_at_batch is not None and cursor == cfg.nan_at_batch:
                loss = loss * float("nan")
        except NumericError:
            lb = None
        value = None if loss is None else float(loss.data)
        if nan_guard(value, self.step, self.snapshot is not None) == "rollback":
            ad.current_tape().reset()
            self.rollback("non-finite loss")
            return None
        ad.backward(loss)
        params = model.parameters()
        grads_ok = all(np.all(np.isfinite(p.grad)) for p in params if p.grad is not None)
        if nan_guard(value, self.step, self.snapshot is not None, grads_ok) == "rollback":
            self.rollback("non-finite gradient")
            return None
        lemb = embedding_grad_norm(model.embeddings) if model.embeddings is not None else None
        pre = clip_gradients(params, cfg.clip)
        post = global_grad_norm(params)
        assert post <= cfg.clip, f"post-clip norm {post} exceeds {cfg.clip}"
        self.optimizer.step()
        self.step += 1
        wall = (time.perf_counter() - t0) * 1000.0 if self.record_timing else 0.0
        row = {"step": self.step, "loss_npd": lb.loss_npd, "loss_head_npd": lb.head_npd,
               "loss_tail_npd": lb.tail_npd, "grad_norm_preclip": pre, "grad_norm_postclip": post,
               "lemb_grad_norm": lemb, "rollbacks": self.rollbacks, "wall_ms": wall,
               "config_hash": self.hash}
        self._write_row(row)
        if self.step % cfg.checkpoint_interval == 0:
            self.checkpoint()
        return row

    def run(self, max_steps=None):
        target = self.config.max_steps if max_steps is None else max_steps
        self.initialize()
        self._open_metrics()
        if self.snapshot is None:
            self.checkpoint()
        try:
            while self.step < target:
                self.train_step()
        finally:
            self.close()
        return self.history

    def save_final(self, path):
        entries = model_entries(self.model)
        entries.update(self.optimizer.state_entries())
        meta = self.meta()
        meta["model"] = self.model.config.to_dict()
        meta["adam_t"] = self.optimizer.t
        return ckpt.save(path, entries, meta)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def check_compatible(meta, corpus_hash):
    stored = meta.get("corpus_hash")
    if stored is not None and corpus_hash is not None and stored != corpus_hash:
        raise CompatibilityError(
            f"checkpoint was trained on corpus {stored}, but the data directory is corpus {corpus_hash}")
