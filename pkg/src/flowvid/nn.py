"""Parameter containers.

A :class:`Module` discovers its parameters, buffers and children from its
attributes in assignment order, which gives stable dotted names for
checkpoints (``blocks.0.steps.1.coupling.conv_out.weight``).
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def parameter(array):
    return Tensor(array, requires_grad=True)


class Module:
    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """Non-trainable numpy arrays that must survive a checkpoint."""
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


class Conv2d(Module):
    """3x3 (or other) convolution with optional zero initialisation."""

    def __init__(self, c_in, c_out, kernel_size=3, stride=1, padding=None,
                 rng=None, zero_init=False, init_std=None):
        if padding is None:
            padding = (kernel_size - 1) // 2
        self.stride = stride
        self.padding = padding
        shape = (c_out, c_in, kernel_size, kernel_size)
        if zero_init:
            w = np.zeros(shape)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            std = init_std if init_std is not None else np.sqrt(2.0 / (c_in * kernel_size ** 2))
            w = rng.normal(0.0, std, size=shape)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)
