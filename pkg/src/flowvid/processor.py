"""Recurrent context processor folding (state, previous frame) into a new state."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .flows import ActNorm
from .nn import Conv2d, Module


@dataclass
class ContextState:
    tensor: Tensor  # (N, state_channels, H, W)
    step: int = 0


def init_state(height, width, batch=1, channels=16):
    if height < 1 or width < 1:
        raise ValueError(f"state size must be positive, got {height}x{width}")
    return ContextState(Tensor(np.zeros((batch, channels, height, width))), 0)


def make_tail_context(state, prev_frame):
    """``state || prev_frame`` along channels."""
    s = state.tensor if isinstance(state, ContextState) else state
    if s.shape[0] != prev_frame.shape[0] or s.shape[2:] != prev_frame.shape[2:]:
        raise ShapeError(f"state {s.shape} and frame {prev_frame.shape} do not line up")
    return ad.concat([s, prev_frame], axis=1)


class ContextProcessor(Module):
    """``next = state + conv_b(relu(conv_a(actnorm(state || frame))))``.

    ``conv_b`` starts at zero, so the update is the identity until trained.
    """

    def __init__(self, state_channels=16, frame_channels=3, hidden=None, rng=None,
                 zero_init_out=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden or 2 * state_channels
        c_in = state_channels + frame_channels
        self.state_channels = state_channels
        self.frame_channels = frame_channels
        self.actnorm = ActNorm(c_in)
        self.conv_a = Conv2d(c_in, hidden, 3, rng=rng)
        self.conv_b = Conv2d(hidden, state_channels, 3, rng=rng, zero_init=zero_init_out)

    def init_state(self, height, width, batch=1):
        return init_state(height, width, batch, self.state_channels)

    def step(self, state, prev_frame):
        s = state.tensor
        if prev_frame.ndim != 4 or prev_frame.shape[1] != self.frame_channels:
            raise ShapeError(f"expected a {self.frame_channels}-channel frame, got {prev_frame.shape}")
        h = make_tail_context(s, prev_frame)
        h, _ = self.actnorm.forward(h)
        update = self.conv_b(ad.relu(self.conv_a(h)))
        return ContextState(ad.add(s, update), state.step + 1)

    __call__ = step


def step_state(processor, state, prev_frame):
    return processor.step(state, prev_frame)
