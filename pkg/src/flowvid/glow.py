"""Multi-scale conditional Glow: squeeze -> K flow steps -> split, per block."""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError
from .flows import FlowStep, gaussian_log_density, split, squeeze, unsplit, unsqueeze, zero_logdet
from .nn import Module


@dataclass
class GlowConfig:
    num_blocks: int = 2
    flows_per_block: int = 4
    coupling: str = "additive"
    hidden: int = 64
    channels: int = 3
    height: int = 16
    width: int = 16

    @classmethod
    def full_scale(cls, **overrides):
        cfg = dict(num_blocks=4, flows_per_block=32, height=64, width=64)
        cfg.update(overrides)
        return cls(**cfg)

    def validate(self):
        if min(self.num_blocks, self.flows_per_block, self.hidden, self.channels) < 1:
            raise ValueError(f"non-positive size in {self}")
        if self.coupling not in ("additive", "affine"):
            raise ValueError(f"coupling must be 'additive' or 'affine', got {self.coupling!r}")
        factor = 2 ** self.num_blocks
        if self.height % factor or self.width % factor:
            raise ShapeError(
                f"frame {self.height}x{self.width} not divisible by 2^{self.num_blocks}; "
                f"choose a size that is a multiple of {factor} or fewer blocks")
        return self

    @property
    def frame_shape(self):
        return (self.channels, self.height, self.width)

    @property
    def dim(self):
        return self.channels * self.height * self.width

    def block_channels(self, b):
        """Channel count inside block ``b`` (after its squeeze)."""
        return 4 * self.channels * 2 ** b

    def latent_shapes(self):
        shapes = []
        h, w = self.height, self.width
        for b in range(self.num_blocks):
            h, w = h // 2, w // 2
            c = self.block_channels(b)
            shapes.append((c // 2 if b < self.num_blocks - 1 else c, h, w))
        return shapes

    def to_dict(self):
        return asdict(self)


class GlowBlock(Module):
    def __init__(self, channels, context_channels, config, rng):
        self.steps = [FlowStep(channels, context_channels, config.hidden, config.coupling, rng=rng)
                      for _ in range(config.flows_per_block)]


class Glow(Module):
    """Exact-likelihood image model, optionally conditioned on a pyramid.

    ``context_channels`` is the channel count of each pyramid level; inside
    block ``b`` the level is squeezed alongside the activations so it lines up
    with the coupling input.
    """

    def __init__(self, config, context_channels=0, rng=None):
        self.config = config.validate()
        self.context_channels = context_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        self.blocks = [GlowBlock(config.block_channels(b), 4 * context_channels, config, rng)
                       for b in range(config.num_blocks)]

    def _levels(self, pyramid):
        n = self.config.num_blocks
        if self.context_channels == 0:
            if pyramid is not None:
                raise ShapeError("unconditioned Glow received a context pyramid")
            return [None] * n
        if pyramid is None or len(pyramid) != n:
            got = None if pyramid is None else len(pyramid)
            raise ShapeError(f"expected a {n}-level context pyramid, got {got}")
        return [squeeze(level) for level in pyramid]

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1:] != self.config.frame_shape:
            raise ShapeError(f"expected frames of shape {self.config.frame_shape}, got {x.shape[1:]}")

    def encode(self, x, pyramid=None):
        """Return ``(latents, logdet)``; latents ordered from first split to last block."""
        self._check_input(x)
        if pyramid is not None and self.context_channels:
            for b, level in enumerate(pyramid):
                want = (x.shape[2] >> b, x.shape[3] >> b)
                if level.shape[2:] != want:
                    raise ShapeError(f"pyramid level {b} is {level.shape[2:]}, block input is {want}")
        levels = self._levels(pyramid)
        zs = []
        logdet = zero_logdet()
        h = x
        last = len(self.blocks) - 1
        for b, block in enumerate(self.blocks):
            h = squeeze(h)
            for step in block.steps:
                h, ld = step.forward(h, levels[b])
                logdet = logdet + ld
            if b < last:
                h, factored = split(h)
                zs.append(factored)
        zs.append(h)
        return zs, logdet

    def decode(self, zs, pyramid=None):
        levels = self._levels(pyramid)
        last = len(self.blocks) - 1
        if len(zs) != len(self.blocks):
            raise ShapeError(f"expected {len(self.blocks)} latents, got {len(zs)}")
        h = zs[-1]
        for b in range(last, -1, -1):
            if b < last:
                h = unsplit(h, zs[b])
            for step in reversed(self.blocks[b].steps):
                h = step.inverse(h, levels[b])
            h = unsqueeze(h)
        return h

    def log_prob(self, x, pyramid=None, check_finite=True):
        """Per-sample continuous log-density in nats, float64 ``(N,)``."""
        zs, logdet = self.encode(x, pyramid)
        total = logdet
        for z in zs:
            total = total + gaussian_log_density(z)
        if total.ndim == 0:
            total = ad.add(total, Tensor(np.zeros(x.shape[0]), dtype=np.float64))
        if check_finite and not np.all(np.isfinite(total.data)):
            raise NumericError("log_prob produced a non-finite value")
        return total

    def sample_latents(self, n, temperature=1.0, rng=None):
        if temperature < 0:
            raise ValueError("temperature must be non-negative")
        shapes = self.config.latent_shapes()
        if temperature == 0:
            return [Tensor(np.zeros((n,) + s)) for s in shapes]
        rng = rng if rng is not None else np.random.default_rng()
        return [Tensor(rng.standard_normal((n,) + s) * temperature) for s in shapes]

    def sample(self, n=1, pyramid=None, temperature=1.0, rng=None):
        zs = self.sample_latents(n, temperature, rng)
        with ad.no_grad():
            return self.decode(zs, pyramid)
