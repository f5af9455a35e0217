"""Context pyramids and learned label images."""

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, StateError
from .nn import Conv2d, Module, parameter


class ConditioningPyramid(Module):
    """Stride-2 conv-ReLU stack: one feature map per Glow block.

    ``build(context)`` returns ``[context, down(context), down(down(context)), ...]``;
    the channel count never changes, each level halves height and width.
    """

    def __init__(self, channels, num_levels, rng=None, zero_init=False):
        if num_levels < 1:
            raise ValueError("a pyramid needs at least one level")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.num_levels = num_levels
        self.convs = [Conv2d(channels, channels, 3, stride=2, padding=1, rng=rng, zero_init=zero_init)
                      for _ in range(num_levels - 1)]

    def build(self, context):
        if context.ndim != 4 or context.shape[1] != self.channels:
            raise ShapeError(f"pyramid expects {self.channels} context channels, got {context.shape}")
        factor = 2 ** (self.num_levels - 1)
        if context.shape[2] % factor or context.shape[3] % factor:
            raise ShapeError(
                f"context size {context.shape[2:]} not divisible by 2^{self.num_levels - 1}")
        levels = [context]
        for conv in self.convs:
            levels.append(ad.relu(conv(levels[-1])))
        return levels

    __call__ = build


def build_pyramid(context, num_levels, rng=None):
    """One-off pyramid with freshly initialised weights (mostly for inspection)."""
    return ConditioningPyramid(context.shape[1], num_levels, rng=rng).build(context)


class LabelEmbedding(Module):
    """One learned ``(3, H, W)`` image per label."""

    def __init__(self, label_count, shape, std=0.05, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.label_count = label_count
        self.table = parameter(rng.normal(0.0, std, size=(label_count,) + tuple(shape)))

    def lookup(self, labels):
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        bad = labels[(labels < 0) | (labels >= self.label_count)]
        if bad.size:
            raise IndexError(f"label {int(bad[0])} outside [0, {self.label_count})")
        return ad.take_rows(self.table, labels)

    __call__ = lookup


def lookup_label(table, label):
    return table.lookup(label)


def embedding_grad_norm(table):
    """Euclidean norm of the whole embedding table's gradient."""
    grad = table.table.grad if isinstance(table, LabelEmbedding) else table.grad
    if grad is None:
        raise StateError("label embeddings have no gradient; run backward first")
    return float(np.sqrt(np.sum(np.square(grad, dtype=np.float64))))
