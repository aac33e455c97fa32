"""Dense N-d tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients. ``Tensor.backward`` orders the recorded
graph topologically and replays the closures in reverse, accumulating into
the ``grad`` of leaf tensors created with ``requires_grad=True``.

Only what the synthesis network needs is provided: broadcasting arithmetic,
reductions, ReLU/sigmoid, same-padded 3D and axis-aligned 1D convolutions,
2x max pooling and nearest upsampling, channel softmax and an L1 loss.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ShapeError, StateError, UnsupportedConfigError

_grad_enabled = True

AXES = {"depth": 1, "height": 2, "width": 3}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._kinks = None

    # ------------------------------------------------------------------ basics
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

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ArgumentError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ArgumentError(f"backward() needs a scalar loss, got shape {self.shape}")
        if grad is None:
            grad = np.ones_like(self.data)
        order = graph_nodes(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -------------------------------------------------------------- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, op, kinks=None):
    out = Tensor(data)
    out.op = op
    out._kinks = kinks
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def graph_nodes(root):
    """Topologically ordered list of tensors reachable from ``root`` (root last).

    This is the computation record replayed by ``backward``: each recorded
    operation appears exactly once.
    """
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def kink_signature(root):
    """Branch decisions (ReLU masks, L1 signs, pooling argmaxes) taken in a graph.

    Two evaluations with equal signatures lie on the same smooth piece, which
    is what makes a finite-difference comparison meaningful.
    """
    return [n._kinks for n in graph_nodes(root) if n._kinks is not None]


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise
def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def power(a, exponent):
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(a.data**exponent, (a,), backward, "pow")


def absolute(a):
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs", sign)


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu",
                   mask)


def sigmoid(a):
    out = _stable_sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a):
    """log(sigmoid(a)) evaluated without overflow or log(0)."""
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _stable_sigmoid(-x),), "log_sigmoid")


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


# ----------------------------------------------------------------- reductions
def reduce_sum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward, "mean")


# -------------------------------------------------------------------- shaping
def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index):
    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tuple(tensors), backward, "concat")


# ------------------------------------------------------------- convolutions
def _check_odd(kernel_shape):
    for k in kernel_shape:
        if k % 2 == 0:
            raise UnsupportedConfigError(f"kernel extent {k} is even; only odd kernels are supported")


def _im2col(x, kshape):
    """(C,D,H,W) -> (C*kd*kh*kw, D*H*W) columns under zero same-padding."""
    c, d, h, w = x.shape
    rd, rh, rw = ((k - 1) // 2 for k in kshape)
    # direct slice assignment is cheaper than np.pad here
    xp = np.zeros((c, d + 2 * rd, h + 2 * rh, w + 2 * rw), dtype=x.dtype)
    xp[:, rd:rd + d, rh:rh + h, rw:rw + w] = x
    win = sliding_window_view(xp, kshape, axis=(1, 2, 3))
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * int(np.prod(kshape)), d * h * w)


def _correlate(x, w):
    cols = _im2col(x, w.shape[2:])
    out = w.reshape(w.shape[0], -1) @ cols
    return out.reshape((w.shape[0],) + x.shape[1:]), cols


def _conv_general(x, w, b, op):
    if x.ndim != 4:
        raise ShapeError(f"{op} input must be (C,D,H,W), got shape {x.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"{op}: input has {x.shape[0]} channels but kernel expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"{op}: bias shape {b.shape} does not match {w.shape[0]} output channels")
    _check_odd(w.shape[2:])
    out, cols = _correlate(x.data, w.data)
    if b is not None:
        out += b.data[:, None, None, None]

    def backward(g):
        g2 = g.reshape(g.shape[0], -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        flipped = np.ascontiguousarray(w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gx, _ = _correlate(g, flipped) if x.requires_grad else (None, None)
        gb = g2.sum(axis=1) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward, op)


def conv3d(x, w, b=None):
    """Stride-1, zero same-padded 3D cross-correlation.

    x: (Cin, D, H, W); w: (Cout, Cin, k, k, k); b: (Cout,) or None.
    """
    if w.ndim != 5:
        raise ShapeError(f"conv3d kernel must be (Cout,Cin,k,k,k), got shape {w.shape}")
    return _conv_general(x, w, b, "conv3d")


def conv1d_axis(x, w, axis, b=None):
    """1D same-padded convolution along one spatial axis of a (C,D,H,W) tensor.

    ``axis`` is one of ``"depth"``, ``"height"``, ``"width"``; w is (Cout, Cin, k).
    """
    if axis not in AXES:
        raise ArgumentError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    if w.ndim != 3:
        raise ShapeError(f"conv1d_axis kernel must be (Cout,Cin,k), got shape {w.shape}")
    shape = [1, 1, 1]
    shape[AXES[axis] - 1] = w.shape[2]
    w5 = reshape(w, w.shape[:2] + tuple(shape))
    return _conv_general(x, w5, b, f"conv1d_{axis}")


# ---------------------------------------------------------- pooling/resample
def _check_divisible(shape, factor, op):
    for name, n in zip(("depth", "height", "width"), shape[1:]):
        if n % factor:
            raise ShapeError(f"{op}: {name} axis extent {n} is not divisible by {factor}")


def max_pool3d(x, factor=2):
    _check_divisible(x.shape, factor, "max_pool3d")
    c, d, h, w = x.shape
    f = factor
    blocks = x.data.reshape(c, d // f, f, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4, 6)
    blocks = blocks.reshape(c, d // f, h // f, w // f, f**3)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(c, d // f, h // f, w // f, f, f, f).transpose(0, 1, 4, 2, 5, 3, 6)
        return (gb.reshape(c, d, h, w),)

    return _result(out, (x,), backward, "max_pool3d", idx)


def upsample3d(x, factor=2):
    """Nearest-neighbour upsampling of every spatial axis."""
    out = x.data
    for ax in (1, 2, 3):
        out = np.repeat(out, factor, axis=ax)
    c, d, h, w = x.shape
    f = factor

    def backward(g):
        return (g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)),)

    return _result(out, (x,), backward, "upsample3d")


# ---------------------------------------------------------- softmax and loss
def softmax_channels(x):
    """Softmax over axis 0 of a (C,D,H,W) tensor, max-subtracted for stability."""
    if x.ndim != 4 or x.shape[0] < 2:
        raise ShapeError(f"softmax_channels needs (C>=2,D,H,W), got shape {x.shape}")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=0, keepdims=True)),)

    return _result(y, (x,), backward, "softmax_channels")


def l1_mean(a, b):
    """Mean absolute difference; the subgradient at a == b is 0."""
    a = _wrap(a)
    b = _wrap(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"l1_mean shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=a.dtype)

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _result(out, (a, b), backward, "l1_mean", np.sign(diff))


# --------------------------------------------------------------------- Adam
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, state):
    """Bias-corrected Adam update applied in place; grads are cleared afterwards."""
    params = list(params)
    if len(params) != len(state.m):
        raise StateError(f"Adam state tracks {len(state.m)} parameters, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise StateError(f"parameter {i} with shape {p.shape} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype)
        p.grad = None


def clip_min(a, floor):
    """max(a, floor) elementwise; no gradient flows where the floor is active."""
    mask = a.data >= floor
    out = np.where(mask, a.data, floor).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * mask,), "clip_min", mask)


def stack_scalars(tensors):
    """Concatenate single-element tensors into a 1D tensor."""
    return concat([t.reshape(1) for t in tensors], axis=0)
