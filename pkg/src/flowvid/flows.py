"""Invertible layers: ActNorm, 1x1 convolution, coupling, squeeze and split.

Every layer maps ``(x, context) -> (y, logdet)`` in :meth:`forward` and
``(y, context) -> x`` in :meth:`inverse`.  ``logdet`` is a float64 tensor,
either per-sample ``(N,)`` or a 0-d scalar when the layer's Jacobian does not
depend on the input (ActNorm, 1x1 conv, additive coupling).
"""

import math

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Tensor
from .errors import NonInvertibleWeightError, ShapeError, SingularMatrixError, StateError
from .nn import Conv2d, Module, parameter

LOG_2PI = math.log(2.0 * math.pi)


def zero_logdet():
    return Tensor(0.0, dtype=np.float64)


def gaussian_log_density(z):
    """Per-sample standard-normal log-density, float64 ``(N,)``."""
    d = z.size // z.shape[0]
    return ad.sum_per_sample(ad.square(z)) * -0.5 + (-0.5 * d * LOG_2PI)


# -------------------------------------------------------------- reshaping ops

def squeeze(x):
    """Space-to-depth by 2; output channel ``4c + 2*dy + dx``."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even height and width, got {x.shape}")
    y = ad.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    y = ad.permute(y, (0, 1, 3, 5, 2, 4))
    return ad.reshape(y, (n, 4 * c, h // 2, w // 2))


def unsqueeze(y):
    n, c4, h, w = y.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs channels divisible by 4, got {y.shape}")
    x = ad.reshape(y, (n, c4 // 4, 2, 2, h, w))
    x = ad.permute(x, (0, 1, 4, 2, 5, 3))
    return ad.reshape(x, (n, c4 // 4, 2 * h, 2 * w))


def split(x):
    """Halve the channels: ``(kept, factored)``."""
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"split needs an even channel count, got {x.shape}")
    return ad.slice_channels(x, 0, c // 2), ad.slice_channels(x, c // 2, c)


def unsplit(kept, factored):
    return ad.concat([kept, factored], axis=1)


# ---------------------------------------------------------------------- layers

class ActNorm(Module):
    """Per-channel ``y = exp(log_scale) * (x + bias)`` with data-dependent init."""

    _buffer_names = ("initialized",)

    def __init__(self, channels, eps=1e-6):
        self.channels = channels
        self.eps = eps
        self.log_scale = parameter(np.zeros((1, channels, 1, 1)))
        self.bias = parameter(np.zeros((1, channels, 1, 1)))
        self.initialized = np.zeros(1, dtype=np.float32)

    @property
    def is_initialized(self):
        return bool(self.initialized[0])

    def initialize(self, x):
        """Set bias/scale so ``x`` comes out zero-mean, unit-variance per channel.

        Channels with (numerically) zero spread keep unit scale.
        """
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        log_scale = np.where(std > self.eps, -np.log(std + self.eps), 0.0)
        self.bias.data[...] = -mean.reshape(self.bias.shape)
        self.log_scale.data[...] = log_scale.reshape(self.log_scale.shape)
        self.initialized[0] = 1.0

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"ActNorm({self.channels}) got input {x.shape}")
        if not self.is_initialized:
            if not self.training:
                raise StateError("ActNorm used in inference mode before initialisation")
            self.initialize(x.data)

    def forward(self, x, context=None):
        self._check(x)
        y = ad.mul(ad.add(x, self.bias), ad.exp(self.log_scale))
        logdet = ad.sum(self.log_scale) * float(x.shape[2] * x.shape[3])
        return y, logdet

    def inverse(self, y, context=None):
        if not self.is_initialized:
            raise StateError("ActNorm inverse before initialisation")
        return ad.sub(ad.mul(y, ad.exp(-self.log_scale)), self.bias)


class InvConv1x1(Module):
    """Learned channel mixing ``y[:, :, i, j] = W @ x[:, :, i, j]``."""

    def __init__(self, channels, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        q, r = np.linalg.qr(rng.normal(size=(channels, channels)))
        # Sign fix makes the rotation Haar-distributed.
        self.weight = parameter(q * np.sign(np.diag(r)))

    def _logabsdet(self):
        try:
            return ad.logabsdet(self.weight)
        except SingularMatrixError as exc:
            raise NonInvertibleWeightError(f"1x1 convolution weight is not invertible: {exc}") from exc

    def forward(self, x, context=None):
        logdet = self._logabsdet() * float(x.shape[2] * x.shape[3])
        return ad.channel_mix(x, self.weight), logdet

    def inverse(self, y, context=None):
        try:
            w_inv = linalg.invert(self.weight.data)
        except SingularMatrixError as exc:
            raise NonInvertibleWeightError(f"1x1 convolution weight is not invertible: {exc}") from exc
        return ad.channel_mix(y, Tensor(w_inv, dtype=self.weight.dtype))


class Coupling(Module):
    """Transform the second channel half conditioned on the first (and context).

    ``additive``: ``y_b = x_b + t``.  ``affine``: ``y_b = exp(log_s) * x_b + t``
    with ``log_s = B * tanh(raw / B)`` so the scale stays in ``[e^-B, e^B]``.
    """

    def __init__(self, channels, context_channels=0, hidden=64, mode="additive",
                 rng=None, scale_bound=2.0):
        if channels % 2:
            raise ShapeError(f"coupling needs an even channel count, got {channels}")
        if mode not in ("additive", "affine"):
            raise ValueError(f"unknown coupling mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.context_channels = context_channels
        self.mode = mode
        self.scale_bound = scale_bound
        half = channels // 2
        out = half if mode == "additive" else channels
        self.conv_in = Conv2d(half + context_channels, hidden, 3, rng=rng)
        self.conv_out = Conv2d(hidden, out, 3, zero_init=True)

    def _check(self, x, context):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"Coupling({self.channels}) got input {x.shape}")
        if self.context_channels:
            if context is None:
                raise ShapeError("coupling was built with context but none was given")
            if context.shape[1] != self.context_channels or context.shape[2:] != x.shape[2:] \
                    or context.shape[0] != x.shape[0]:
                raise ShapeError(
                    f"context {context.shape} does not match input {x.shape} "
                    f"with {self.context_channels} context channels")
        elif context is not None:
            raise ShapeError("coupling was built without context but one was given")

    def _net(self, xa, context):
        h = xa if context is None else ad.concat([xa, context], axis=1)
        return self.conv_out(ad.relu(self.conv_in(h)))

    def _shift_and_log_scale(self, xa, context):
        h = self._net(xa, context)
        if self.mode == "additive":
            return h, None
        half = self.channels // 2
        raw = ad.slice_channels(h, 0, half)
        t = ad.slice_channels(h, half, self.channels)
        b = self.scale_bound
        return t, ad.tanh(raw / b) * b

    def forward(self, x, context=None):
        self._check(x, context)
        xa, xb = split(x)
        t, log_s = self._shift_and_log_scale(xa, context)
        if log_s is None:
            return unsplit(xa, ad.add(xb, t)), zero_logdet()
        yb = ad.add(ad.mul(xb, ad.exp(log_s)), t)
        return unsplit(xa, yb), ad.sum_per_sample(log_s)

    def inverse(self, y, context=None):
        self._check(y, context)
        ya, yb = split(y)
        t, log_s = self._shift_and_log_scale(ya, context)
        xb = ad.sub(yb, t)
        if log_s is not None:
            xb = ad.mul(xb, ad.exp(-log_s))
        return unsplit(ya, xb)


class FlowStep(Module):
    """ActNorm -> invertible 1x1 convolution -> coupling."""

    def __init__(self, channels, context_channels=0, hidden=64, mode="additive", rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.actnorm = ActNorm(channels)
        self.inv1x1 = InvConv1x1(channels, rng=rng)
        self.coupling = Coupling(channels, context_channels, hidden, mode, rng=rng)

    def layers(self):
        return (self.actnorm, self.inv1x1, self.coupling)

    def forward(self, x, context=None):
        logdet = zero_logdet()
        for layer in self.layers():
            x, ld = layer.forward(x, context)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, y, context=None):
        for layer in reversed(self.layers()):
            y = layer.inverse(y, context)
        return y
