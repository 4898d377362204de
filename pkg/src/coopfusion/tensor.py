"""Dense float64 tensors with reverse-mode automatic differentiation.

Design constraints, fixed deliberately small:
  * one dtype everywhere (float64), numpy arrays as storage;
  * define-by-run graph of closures, iterative topological backward;
  * broadcasting limited to the patterns the model uses (leading batch
    dimensions plus trailing per-channel vectors), handled by summing
    gradients back to the operand shape;
  * softmax treats -inf inputs as hard mask entries that produce exact 0.0
    outputs and exact 0.0 gradients; a fully masked row is an error, never
    a silent NaN;
  * gradients accumulate across backward() calls until explicitly reset.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonScalarLossError(ValueError):
    """backward() was called on a tensor with more than one element."""


class DegenerateMaskError(ValueError):
    """softmax saw a row whose entries are all -inf (everything masked)."""


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_grad_borrowed",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._grad_borrowed = False
        self._parents = ()
        self._backward = None

    # -- plumbing -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
            self._grad_borrowed = False
        return self.grad

    def _accum_grad(self, g):
        """Add a backward contribution without pre-zeroed buffers.

        The first contribution is stored by reference ("borrowed") — it may
        alias another node's buffer or be a read-only view, so it is never
        mutated in place. A second contribution allocates a fresh owned
        buffer; later ones accumulate into it.
        """
        if self.grad is None:
            self.grad = g
            self._grad_borrowed = True
        elif self._grad_borrowed:
            self.grad = self.grad + g
            self._grad_borrowed = False
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None
        self._grad_borrowed = False

    def detach(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_const(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def swap_last2(self):
        return swap_last2(self)

    # -- backward -----------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise NonScalarLossError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        # Interior nodes get fresh gradients every call; leaves accumulate.
        # Buffers are allocated lazily by _accum_grad as contributions arrive;
        # a node whose grad is still None received only zero gradient and can
        # skip its backward entirely.
        for node in topo:
            if node._parents:
                node.grad = None
                node._grad_borrowed = False
        self._accum_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(*parents: Tensor) -> bool:
    return _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if parents:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data
    if not _track(a, b):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(p for p in (a, b) if p.requires_grad)

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g, b.data.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data
    if not _track(a, b):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(p for p in (a, b) if p.requires_grad)

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g * a.data, b.data.shape))

    out._backward = _bw
    return out


def pow_const(a, p) -> Tensor:
    a = _wrap(a)
    p = float(p)
    data = a.data**p
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)

    def _bw():
        a._accum_grad(out.grad * p * a.data ** (p - 1.0))

    out._backward = _bw
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)
    mask = a.data > 0.0

    def _bw():
        a._accum_grad(out.grad * mask)

    out._backward = _bw
    return out


def gelu(a) -> Tensor:
    """Smooth self-gated unit x * sigmoid(1.702 x).

    Composed from existing primitives, so the backward pass needs no dedicated
    rule. Unlike relu it has curvature everywhere, which lets one hidden layer
    expose products of its inputs instead of only piecewise-linear folds.
    """
    a = _wrap(a)
    return a * sigmoid(a * 1.702)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)

    def _bw():
        a._accum_grad(out.grad * out.data * (1.0 - out.data))

    out._backward = _bw
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)

    def _bw():
        a._accum_grad(out.grad * out.data)

    out._backward = _bw
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)

    def _bw():
        a._accum_grad(out.grad / a.data)

    out._backward = _bw
    return out


def absolute(a) -> Tensor:
    a = _wrap(a)
    data = np.abs(a.data)
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)
    sign = np.sign(a.data)

    def _bw():
        a._accum_grad(out.grad * sign)

    out._backward = _bw
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient passes only strictly inside (lo, hi)."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)
    mask = (a.data > lo) & (a.data < hi)

    def _bw():
        a._accum_grad(out.grad * mask)

    out._backward = _bw
    return out


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; `cond` is plain boolean data (not differentiated)."""
    a, b = _wrap(a), _wrap(b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)
    if not _track(a, b):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(p for p in (a, b) if p.requires_grad)

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accum_grad(_unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    out._backward = _bw
    return out


# -- matmul ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    if not _track(a, b):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(p for p in (a, b) if p.requires_grad)

    def _bw():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum_grad(_unbroadcast(gb, b.data.shape))

    out._backward = _bw
    return out


# -- reductions ---------------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)
    axes = _axis_tuple(axis, a.ndim)

    def _bw():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accum_grad(np.broadcast_to(g, a.data.shape))

    out._backward = _bw
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)
    orig = a.data.shape

    def _bw():
        a._accum_grad(out.grad.reshape(orig))

    out._backward = _bw
    return out


def swap_last2(a) -> Tensor:
    a = _wrap(a)
    data = np.swapaxes(a.data, -1, -2)
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)

    def _bw():
        a._accum_grad(np.swapaxes(out.grad, -1, -2))

    out._backward = _bw
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not (_GRAD_ENABLED[0] and any(t.requires_grad for t in tensors)):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(t for t in tensors if t.requires_grad)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    ax = axis % data.ndim

    def _bw():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(int(lo), int(hi))
                t._accum_grad(g[tuple(sl)])

    out._backward = _bw
    return out


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Select rows of a 2D tensor by integer index (duplicates allowed)."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2D tensor, got {a.shape}")
    idx = np.asarray(index, dtype=np.int64)
    data = a.data[idx]
    if not _track(a):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = (a,)

    def _bw():
        contrib = np.zeros_like(a.data)
        np.add.at(contrib, idx, out.grad)
        a._accum_grad(contrib)

    out._backward = _bw
    return out


# -- normalization ------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; -inf entries map to exactly 0.

    Raises DegenerateMaskError when a whole slice along `axis` is -inf.
    """
    a = _wrap(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateMaskError("softmax row with every entry masked (-inf)")
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / s
    if not _track(a):
        return Tensor(y)
    out = Tensor(y)
    out.requires_grad = True
    out._parents = (a,)

    def _bw():
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accum_grad(y * (g - dot))

    out._backward = _bw
    return out


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain and bias."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    x = a.data
    c = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data
    if not _track(a, gain, bias):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(p for p in (a, gain, bias) if p.requires_grad)

    def _bw():
        g = out.grad
        if gain.requires_grad:
            gain._accum_grad(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accum_grad(_unbroadcast(g, bias.data.shape))
        if a.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            a._accum_grad(inv * term)

    out._backward = _bw
    return out
