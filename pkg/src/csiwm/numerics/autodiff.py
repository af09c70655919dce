"""A small reverse-mode differentiation engine over numpy arrays.

Every op takes :class:`Node` objects (or plain arrays, treated as constants)
and returns a new ``Node``.  Nodes whose inputs carry no gradient are built
as constants with no backward closure, so forward-only passes cost little
more than plain numpy.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .expm import expm as _expm
from .expm import expm_frechet

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_corrupted: set[str] = set()


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "parents", "rule", "requires_grad", "grad", "_backward", "name")

    def __init__(self, value, parents: tuple["Node", ...] = (), backward: BackwardFn | None = None,
                 rule: str = "leaf", requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.rule = rule
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(rule={self.rule}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def param(value, name: str | None = None) -> Node:
    """Leaf node that accumulates a gradient."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _make(value: np.ndarray, parents: Iterable[Node], backward: BackwardFn, rule: str) -> Node:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Node(value, parents, backward, rule, requires_grad=True)
    return Node(value, rule=rule)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@contextlib.contextmanager
def corrupted_rules(*rules: str):
    """Deliberately scale the backward output of the named rules (negative controls)."""
    before = set(_corrupted)
    _corrupted.update(rules)
    try:
        yield
    finally:
        _corrupted.clear()
        _corrupted.update(before)


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every reachable leaf with ``requires_grad``.

    Returns a mapping from leaf node to its gradient.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            st = state.get(key)
            if st == 2:
                continue
            if st == 1:
                raise ValueError("computation graph has a cycle")
            state[key] = 1
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            if parent.requires_grad:
                pst = state.get(id(parent))
                if pst == 1:
                    raise ValueError("computation graph has a cycle")
                if pst is None:
                    stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        pgrads = node._backward(g)
        if node.rule in _corrupted:
            pgrads = [None if pg is None else 1.1 * pg for pg in pgrads]
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    return leaves


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Node:
    a, b = const(a), const(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = const(a), const(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = const(a), const(b)

    def bw(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = const(a), const(b)
    out = a.value / b.value

    def bw(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def square(x) -> Node:
    x = const(x)
    return _make(x.value ** 2, (x,), lambda g: (2.0 * x.value * g,), "square")


def sqrt(x) -> Node:
    x = const(x)
    out = np.sqrt(x.value)
    return _make(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def absolute(x) -> Node:
    x = const(x)
    return _make(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),), "abs")


def exp(x) -> Node:
    x = const(x)
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def relu(x) -> Node:
    x = const(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def hinge(x) -> Node:
    """max(0, x); same rule as relu but logged separately."""
    x = const(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "hinge")


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Node:
    x = const(x)
    cdf = ndtr(x.value)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.value ** 2)
        return (g * (cdf + x.value * pdf),)

    return _make(x.value * cdf, (x,), bw, "gelu")


def sigmoid(x) -> Node:
    x = const(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Node:
    x = const(x)
    out = np.tanh(x.value)
    return _make(out, (x,), lambda g: (g * (1.0 - out ** 2),), "tanh")


# -- reductions and shape ----------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    x = const(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = const(x)
    count = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Node:
    x = const(x)
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Node:
    """Permute axes; default swaps the last two."""
    x = const(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    return _make(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, index) -> Node:
    x = const(x)

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        out = np.zeros_like(x.value)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(x.value[index], (x,), bw, "slice")


def concat(xs: Sequence, axis: int = 0) -> Node:
    xs = [const(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.value for x in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence, axis: int = 0) -> Node:
    xs = [const(x) for x in xs]
    n = len(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([x.value for x in xs], axis=axis), xs, bw, "stack")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = const(a), const(b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            bv = b.value
            if bv.ndim == 1:
                ga = np.multiply.outer(g, bv)
            else:
                ga = g @ np.swapaxes(bv, -1, -2) if a.ndim > 1 else (g[..., None, :] @ np.swapaxes(bv, -1, -2))[..., 0, :]
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            av = a.value
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            elif b.ndim == 1:
                gb = (np.swapaxes(av, -1, -2) @ g[..., None])[..., 0]
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(a.value @ b.value, (a, b), bw, "matmul")


def expm(a) -> Node:
    """Matrix exponential of a square matrix or stack; adjoint via the Frechet block trick."""
    a = const(a)

    def bw(g):
        return (expm_frechet(np.swapaxes(a.value, -1, -2), g),)

    return _make(_expm(a.value), (a,), bw, "expm")


# -- normalization -----------------------------------------------------------

def _normalize(x: Node, axes: tuple[int, ...], eps: float, rule: str):
    mu = x.value.mean(axis=axes, keepdims=True)
    var = x.value.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    n = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        gs = g.sum(axis=axes, keepdims=True)
        gx = (g * xhat).sum(axis=axes, keepdims=True)
        return ((inv / n) * (n * g - gs - xhat * gx),)

    return _make(xhat, (x,), bw, rule), mu, var


def batch_norm(x, running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
               training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Node:
    """Normalize each channel (axis 1) by batch statistics, or running ones in eval mode.

    In training mode the running buffers, when given, are updated in place
    with the unbiased batch variance.
    """
    x = const(x)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    if not training:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        return mul(sub(x, running_mean.reshape(bshape)), inv)
    out, mu, var = _normalize(x, axes, eps, "batchnorm")
    if running_mean is not None and running_var is not None:
        n = int(np.prod([x.shape[a] for a in axes]))
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    return out


def standardize(x, eps: float = 1e-5) -> Node:
    """Per-sample zero mean / unit variance over the last axis."""
    x = const(x)
    out, _, _ = _normalize(x, (x.ndim - 1,), eps, "standardize")
    return out


def l2_normalize(x, eps: float = 1e-12) -> Node:
    x = const(x)
    norm = sqrt(add(sum(square(x), axis=-1, keepdims=True), eps))
    return div(x, norm)


# -- convolution -------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Node:
    """2-D cross-correlation, x: (N, C, H, W), w: (O, C, kh, kw)."""
    x, w = const(x), const(w)
    N, C, Hh, W = x.shape
    O, C2, kh, kw = w.shape
    if C != C2:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {C2}")
    Ho, Wo = _conv_out(Hh, kh, stride, pad), _conv_out(W, kw, stride, pad)
    if pad:
        xp = np.zeros((N, C, Hh + 2 * pad, W + 2 * pad))
        xp[:, :, pad:-pad, pad:-pad] = x.value
    else:
        xp = x.value
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # (C, kh, kw, N, Ho, Wo): channel-major keeps the gather copy mostly contiguous
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, N * Ho * Wo)
    wmat = w.value.reshape(O, -1)
    out = (wmat @ cols).reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3)
    parents = [x, w]
    if b is not None:
        b = const(b)
        out = out + b.value.reshape(1, O, 1, 1)
        parents.append(b)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, N * Ho * Wo)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(C, kh, kw, N, Ho, Wo)
            gxp = np.zeros((C, N) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad : pad + Hh, pad : pad + W] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")
