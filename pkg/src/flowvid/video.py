"""Head/tail video model: first frame from the head Glow, the rest from the tail.

Pixels live in ``[0, 255]``; the flows see ``(pixel + u) / 256`` with
``u ~ U[0, 1)`` during training (dequantisation) or ``u = 0.5`` for
conditioning frames and evaluation contexts.  Negative log-likelihoods are
reported in nats per dimension of the discrete 8-bit data, i.e. including the
``d * log 256`` volume term.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import ConditioningPyramid, LabelEmbedding
from .errors import ShapeError, UsageError
from .glow import Glow, GlowConfig
from .nn import Module
from .processor import ContextProcessor, make_tail_context

VARIANTS = ("init", "prev_frame", "state", "state_label")
LOG_256 = math.log(256.0)


def check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose one of {', '.join(VARIANTS)}")
    return variant


def dequantize(pixels, rng=None):
    """Map 8-bit pixels into ``[0, 1)``; uniform noise when ``rng`` is given."""
    pixels = np.asarray(pixels, dtype=np.float64)
    u = rng.random(pixels.shape) if rng is not None else 0.5
    return (pixels + u) / 256.0


def to_pixels(x):
    """Clamp a model-space array back to uint8 pixels (display only)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return np.clip(np.floor(x * 256.0), 0, 255).astype(np.uint8)


def nll_per_dim(log_prob, dim):
    """Discrete-data NLL in nats/dim from a continuous log-density."""
    return -np.asarray(log_prob) / dim + LOG_256


@dataclass
class ModelConfig:
    glow: GlowConfig = field(default_factory=GlowConfig)
    variant: str = "state"
    state_channels: int = 16
    label_count: int = 12
    embedding_std: float = 0.05
    seed: int = 0

    def validate(self):
        check_variant(self.variant)
        self.glow.validate()
        return self

    @property
    def uses_label(self):
        return self.variant == "state_label"

    @property
    def uses_state(self):
        return self.variant in ("state", "state_label")

    @property
    def tail_context_channels(self):
        c = self.glow.channels
        return {"init": 0, "prev_frame": c}.get(self.variant, self.state_channels + c)

    def to_dict(self):
        return {"glow": self.glow.to_dict(), "variant": self.variant,
                "state_channels": self.state_channels, "label_count": self.label_count,
                "embedding_std": self.embedding_std, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        glow = GlowConfig(**d.pop("glow", {}))
        return cls(glow=glow, **d)


class Pyramids(Module):
    def __init__(self, head=None, tail=None):
        self.head = head
        self.tail = tail


@dataclass
class VideoRecord:
    frames: np.ndarray  # (T, 3, H, W) uint8
    label: int = 0
    video_id: int = 0


class VideoModel(Module):
    """Parameter groups: ``head``, ``tail``, ``processor``, ``embeddings``, ``pyramid``."""

    GROUPS = ("head", "tail", "processor", "embeddings", "pyramid")

    def __init__(self, config):
        self.config = config.validate()
        g = config.glow
        rng = np.random.default_rng(config.seed)
        head_ctx = g.channels if config.uses_label else 0
        self.head = Glow(g, context_channels=head_ctx, rng=rng)
        self.tail = Glow(g, context_channels=config.tail_context_channels, rng=rng)
        self.processor = (ContextProcessor(config.state_channels, g.channels, rng=rng)
                          if config.uses_state else None)
        self.embeddings = (LabelEmbedding(config.label_count, g.frame_shape, config.embedding_std, rng=rng)
                           if config.uses_label else None)
        self.pyramid = Pyramids(
            head=ConditioningPyramid(head_ctx, g.num_blocks, rng=rng) if head_ctx else None,
            tail=(ConditioningPyramid(config.tail_context_channels, g.num_blocks, rng=rng)
                  if config.tail_context_channels else None))

    @property
    def variant(self):
        return self.config.variant

    @property
    def frame_dim(self):
        return self.config.glow.dim

    # ------------------------------------------------------------- contexts

    def head_pyramid(self, labels):
        if self.embeddings is None:
            return None
        return self.pyramid.head.build(self.embeddings.lookup(labels))

    def tail_contexts(self, clean):
        """Context for frames ``1..T-1`` stacked time-major: row ``(t-1)*N + n``.

        ``clean`` is ``(N, T, C, H, W)`` model-space conditioning frames.
        """
        n, t = clean.shape[:2]
        if self.variant == "init":
            return None
        prev = [Tensor(clean[:, k]) for k in range(t - 1)]
        if self.variant == "prev_frame":
            return ad.concat(prev, axis=0) if len(prev) > 1 else prev[0]
        state = self.processor.init_state(*clean.shape[3:], batch=n)
        ctx = []
        for frame in prev:
            state = self.processor.step(state, frame)
            ctx.append(make_tail_context(state, frame))
        return ad.concat(ctx, axis=0) if len(ctx) > 1 else ctx[0]

    # ----------------------------------------------------------- likelihood

    def frame_log_probs(self, x, clean, labels):
        """Continuous log-densities of every frame.

        ``x`` holds the dequantised frames ``(N, T, C, H, W)``, ``clean`` the
        conditioning frames.  Returns ``(head (N,), tail (N*(T-1),) or None)``
        with the tail in time-major order.
        """
        x = np.asarray(x)
        n, t = x.shape[:2]
        if x.shape[2:] != self.config.glow.frame_shape:
            raise ShapeError(f"frames {x.shape[2:]} do not match model {self.config.glow.frame_shape}")
        head = self.head.log_prob(Tensor(x[:, 0]), self.head_pyramid(labels))
        if t == 1:
            return head, None
        ctx = self.tail_contexts(clean)
        pyr = self.pyramid.tail.build(ctx) if ctx is not None else None
        tail_x = Tensor(np.concatenate([x[:, k] for k in range(1, t)], axis=0))
        return head, self.tail.log_prob(tail_x, pyr)

    def initialize(self, x, clean, labels):
        """Run one forward pass in training mode so every ActNorm initialises."""
        self.train()
        with ad.no_grad():
            self.frame_log_probs(x, clean, labels)

    # -------------------------------------------------------------- sampling

    def generate(self, label=None, num_frames=1, temperature=1.0, seed=0):
        """Sample a video; returns a :class:`VideoRecord` of uint8 frames."""
        if num_frames < 1:
            raise ValueError("num_frames must be at least 1")
        if label is not None and self.embeddings is None:
            raise UsageError("this model has no label embeddings; drop the label")
        if self.embeddings is not None and label is None:
            label = 0
        g = self.config.glow
        rng = np.random.default_rng(seed)
        self.eval()
        frames = []
        with ad.no_grad():
            pyr = self.head_pyramid([label]) if self.embeddings is not None else None
            x0 = self.head.sample(1, pyr, temperature, rng)
            frames.append(to_pixels(x0)[0])
            state = self.processor.init_state(g.height, g.width) if self.processor is not None else None
            for _ in range(1, num_frames):
                prev = Tensor(dequantize(frames[-1][None]))
                if self.variant == "init":
                    pyr = None
                elif self.variant == "prev_frame":
                    pyr = self.pyramid.tail.build(prev)
                else:
                    state = self.processor.step(state, prev)
                    pyr = self.pyramid.tail.build(make_tail_context(state, prev))
                xt = self.tail.sample(1, pyr, temperature, rng)
                frames.append(to_pixels(xt)[0])
        return VideoRecord(np.stack(frames), -1 if label is None else int(label), -1)


def generate_video(model, label=None, num_frames=1, temperature=1.0, seed=0):
    return model.generate(label, num_frames, temperature, seed)
