"""A small define-by-run reverse-mode autodiff engine over numpy arrays.

Every differentiable operation that touches a tensor with ``requires_grad``
appends a node to the current thread's :class:`Tape`.  :func:`backward` walks
the tape in reverse recording order, accumulates gradients into leaf
tensors and resets the tape for the next step.

Storage is float32 by default; ``with precision(np.float64):`` switches newly
created tensors to float64 (used by the finite-difference tests).  Reductions
(:func:`sum`, :func:`sum_per_sample`) always produce float64 so log-dets and
losses accumulate in double precision.

Binary operations accept identical shapes, 0-d scalars, or a per-channel
``(1, C, 1, 1)`` operand against a 4-D one.  Nothing more general.
"""

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import linalg
from .errors import DomainError, ShapeError, UsageError

_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` inside the block."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward):
        out._node = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))

    def reset(self):
        # Intermediates outlive the tape; turn them into constants.
        for node in self.nodes:
            node.out._node = None
            node.out.requires_grad = False
        self.nodes = []


def current_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


class Tensor:
    """Dense array plus optional gradient.

    Parameters are leaf tensors created with ``requires_grad=True``; their
    ``grad`` accumulates across :func:`backward` calls until cleared with
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None

    @classmethod
    def _wrap(cls, array):
        t = cls.__new__(cls)
        t.data = array
        t.grad = None
        t.requires_grad = False
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only supported by a Python scalar")
        return scale(self, 1.0 / other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    if np.ndim(x) == 0:
        return Tensor(x, dtype=np.float64)
    return Tensor(x)


def _result(array, inputs, backward):
    out = Tensor._wrap(array)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(out, inputs, backward)
    return out


def backward(loss):
    """Populate ``.grad`` of every leaf reachable from scalar ``loss``."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError("backward() needs a scalar tensor")
    if not loss.requires_grad or loss._node is None:
        raise UsageError("backward() on a tensor that is not recorded on the tape")
    tape = current_tape()
    grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for node in reversed(tape.nodes[:loss._node + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if g.dtype != node.out.data.dtype:
            g = g.astype(node.out.data.dtype)
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                t.grad = gi if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.reset()


# ----------------------------------------------------------------- elementwise

def _check_binary(a, b, name):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    for p, q in ((a.shape, b.shape), (b.shape, a.shape)):
        if len(p) == 4 and q == (1, p[1], 1, 1):
            return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return g.sum()
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), bw)


def scale(x, c):
    c = float(c)
    return _result(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def square(x):
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x):
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x):
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


# ------------------------------------------------------------------ reductions

def sum(x):  # noqa: A001 - mirrors numpy naming
    """Total sum as a float64 0-d tensor."""
    return _result(np.sum(x.data, dtype=np.float64), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def sum_per_sample(x):
    """Sum over every axis but the first; float64 result of shape ``(N,)``."""
    axes = tuple(range(1, x.ndim))
    out = np.sum(x.data, axis=axes, dtype=np.float64)

    def bw(g):
        return (np.broadcast_to(g.reshape((-1,) + (1,) * (x.ndim - 1)), x.shape).astype(x.dtype),)
    return _result(out, (x,), bw)


def mean(x):
    return scale(sum(x), 1.0 / x.size)


# ------------------------------------------------------------------- structure

def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def slice_channels(x, start, stop):
    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)
    return _result(np.ascontiguousarray(x.data[:, start:stop]), (x,), bw)


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def permute(x, axes):
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def take_rows(table, index):
    """Gather ``table[index]`` along the first axis (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)
    return _result(table.data[index], (table,), bw)


# ----------------------------------------------------------------- convolution

def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation over ``(N, C, H, W)`` input."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    n, _, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col once; the backward pass reuses the same column matrix.
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c_in * kh * kw)
    kmat = kernel.data.reshape(c_out, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gk = (g2.T @ cols).reshape(kernel.shape)
        # Scatter in channel-last layout: contiguous slices are much cheaper.
        k_last = kernel.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
        gcols = (g2 @ k_last).reshape(n, ho, wo, kh * kw, c_in)
        hp, wp = xp.shape[2:]
        gxp = np.zeros((n, hp, wp, c_in), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i * kw + j]
        gxp = gxp.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gx = np.ascontiguousarray(gx)
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, lambda g: bw(g)[:len(inputs)])


def channel_mix(x, weight):
    """Apply a ``C x C`` matrix to the channel vector at every position."""
    if x.ndim != 4 or weight.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"channel_mix: input {x.shape} does not match weight {weight.shape}")
    out = np.ascontiguousarray(np.tensordot(weight.data, x.data, axes=([1], [1])).transpose(1, 0, 2, 3))

    def bw(g):
        gx = np.tensordot(weight.data.T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
        gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw
    return _result(out, (x, weight), bw)


def logabsdet(weight):
    """log|det W| as a float64 0-d tensor; gradient is ``inv(W).T``."""
    value = linalg.log_abs_det(weight.data)

    def bw(g):
        return (float(g) * linalg.invert(weight.data).T,)
    return _result(np.asarray(value, dtype=np.float64), (weight,), bw)
