"""Dense tensors with reverse-mode automatic differentiation.

numpy does the arithmetic; this module adds the graph bookkeeping. Each
operation records its inputs and a backward rule as a closure on the output
tensor, so a fresh graph is built per forward pass and garbage-collected
once gradients have been pulled out. Parameters (leaf tensors created with
``parameter``) persist across graphs.

Two numeric regimes are supported:

* training mode (default): float32 storage, no per-op validation; callers
  guard divergence with a finite-loss check per step.
* verification mode (``verification_mode()`` or env ``MMBT_VERIFY=1``):
  float64 storage and every op validates that its output is finite.

Kernel determinism: all reductions happen through numpy/BLAS with a fixed
summation order for fixed shapes, so identical seeds give bit-identical
runs on the same build.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    NumericalError,
    ParameterError,
)

_VERIFY = [os.environ.get("MMBT_VERIFY") == "1"]
_GRAD = [True]

GELU_COEF_SQRT_2_OVER_PI = 0.7978845608
GELU_COEF_CUBIC = 0.044715


def verification_enabled():
    """True when 64-bit verification mode is active."""
    return _VERIFY[0]


@contextmanager
def verification_mode(enabled=True):
    """Temporarily switch to float64 storage with per-op finite checks."""
    prev = _VERIFY[0]
    _VERIFY[0] = enabled
    try:
        yield
    finally:
        _VERIFY[0] = prev


@contextmanager
def no_grad():
    """Skip graph construction inside the block (inference paths)."""
    prev = _GRAD[0]
    _GRAD[0] = False
    try:
        yield
    finally:
        _GRAD[0] = prev


def default_dtype():
    return np.float64 if _VERIFY[0] else np.float32


class Tensor:
    """n-dimensional array node of a reverse-mode differentiation graph.

    ``data`` is the row-major numpy buffer; ``grad`` is an equally shaped
    accumulator present exactly when ``requires_grad`` is set. Repeated
    ``backward`` calls accumulate into ``grad``; zero it between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf"):
        arr = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=default_dtype())
        if arr.size == 0:
            raise DimensionError(f"op '{op}': zero-size tensors are not supported")
        if _VERIFY[0] and not np.isfinite(arr).all():
            raise NumericalError(f"op '{op}' produced non-finite values")
        self.data = arr
        self.requires_grad = _GRAD[0] and (
            bool(requires_grad) or any(p.requires_grad for p in parents)
        )
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.op = op
        self._parents = parents if self.requires_grad else ()
        self._backward = None

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

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar, mostly for tests and small compositions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def tensor(data, dtype=None):
    """Wrap raw data as a constant leaf, cast to the active precision."""
    return Tensor(np.asarray(data, dtype=dtype or default_dtype()))


def parameter(data):
    """Wrap raw data as a trainable leaf (allocates a grad buffer)."""
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


def _constant(value, like):
    """Coerce a python scalar / ndarray to a constant Tensor matching `like`."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _acc(flow, t, g):
    """Accumulate a gradient contribution for `t` into the flow dict.

    Rebinds instead of mutating so contributions that alias each other
    (identity-like backwards hand the same array to several parents)
    can never corrupt one another.
    """
    if not t.requires_grad:
        return
    k = id(t)
    prev = flow.get(k)
    flow[k] = g if prev is None else prev + g


def _topo(root):
    """Iterative post-order over the grad-requiring subgraph: inputs first."""
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        nxt = next(parents, None)
        if nxt is None:
            order.append(node)
            stack.pop()
        elif nxt.requires_grad and id(nxt) not in visited:
            visited.add(id(nxt))
            stack.append((nxt, iter(nxt._parents)))
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into every grad-requiring node's ``grad``.

    Traverses the op records in exact reverse topological order, so each
    node's gradient is fully accumulated before it is propagated further.
    Calling backward twice on the same graph adds the same gradients again.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    flow = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._backward is not None:
            node._backward(g, flow)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = a if isinstance(a, Tensor) else _constant(a, b)
    b = _constant(b, a)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}") from None
    out = Tensor(out_data, parents=(a, b), op="add")
    if out.requires_grad:

        def bw(g, flow):
            if a.requires_grad:
                _acc(flow, a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _acc(flow, b, _unbroadcast(g, b.data.shape))

        out._backward = bw
    return out


def sub(a, b):
    a = a if isinstance(a, Tensor) else _constant(a, b)
    b = _constant(b, a)
    try:
        out_data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}") from None
    out = Tensor(out_data, parents=(a, b), op="sub")
    if out.requires_grad:

        def bw(g, flow):
            if a.requires_grad:
                _acc(flow, a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _acc(flow, b, _unbroadcast(-g, b.data.shape))

        out._backward = bw
    return out


def neg(a):
    out = Tensor(-a.data, parents=(a,), op="neg")
    if out.requires_grad:

        def bw(g, flow):
            _acc(flow, a, -g)

        out._backward = bw
    return out


def mul(a, b):
    a = a if isinstance(a, Tensor) else _constant(a, b)
    b = _constant(b, a)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}") from None
    out = Tensor(out_data, parents=(a, b), op="mul")
    if out.requires_grad:

        def bw(g, flow):
            if a.requires_grad:
                _acc(flow, a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _acc(flow, b, _unbroadcast(g * a.data, b.data.shape))

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra


def _swap(x):
    return x.swapaxes(-1, -2)


def matmul(a, b):
    """Matrix product with the three layouts the models need.

    Supported: (m,k)@(k,n); batched (N,m,k)@(N,k,n); and stacked-by-matrix
    (N,m,k)@(k,n). Backward: dA = dC.Bt, dB = At.dC (batch-summed where B
    is shared across the stack).
    """
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects Tensor operands")
    ad, bd = a.data, b.data
    ok = (
        (ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0])
        or (ad.ndim == 3 and bd.ndim == 2 and ad.shape[2] == bd.shape[0])
        or (
            ad.ndim == 3
            and bd.ndim == 3
            and ad.shape[0] == bd.shape[0]
            and ad.shape[2] == bd.shape[1]
        )
    )
    if not ok:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd, parents=(a, b), op="matmul")
    if out.requires_grad:

        def bw(g, flow):
            if a.requires_grad:
                _acc(flow, a, g @ _swap(bd))
            if b.requires_grad:
                if ad.ndim == 3 and bd.ndim == 2:
                    k = ad.shape[-1]
                    _acc(flow, b, ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
                else:
                    _acc(flow, b, _swap(ad) @ g)

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), parents=(a,), op="reshape")
    if out.requires_grad:
        orig = a.data.shape

        def bw(g, flow):
            _acc(flow, a, g.reshape(orig))

        out._backward = bw
    return out


def transpose(a, axes):
    out = Tensor(np.transpose(a.data, axes), parents=(a,), op="transpose")
    if out.requires_grad:
        inv = tuple(np.argsort(axes))

        def bw(g, flow):
            _acc(flow, a, np.transpose(g, inv))

        out._backward = bw
    return out


def concat(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor(out_data, parents=tuple(parts), op="concat")
    if out.requires_grad:
        cuts = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

        def bw(g, flow):
            for p, piece in zip(parts, np.split(g, cuts, axis=axis)):
                _acc(flow, p, piece)

        out._backward = bw
    return out


def slice_axis(a, axis, start, stop):
    """Contiguous slice along one axis; backward scatters into zeros."""
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(a.data.ndim))
    piece = a.data[idx]
    if piece.size == 0:
        raise DimensionError(f"empty slice [{start}:{stop}] on axis {axis} of {a.data.shape}")
    out = Tensor(piece, parents=(a,), op="slice")
    if out.requires_grad:
        shape = a.data.shape

        def bw(g, flow):
            z = np.zeros(shape, dtype=g.dtype)
            z[idx] = g
            _acc(flow, a, z)

        out._backward = bw
    return out


def expand0(a, n):
    """Stack `n` read-only copies of `a` along a new leading axis."""
    out = Tensor(np.broadcast_to(a.data, (n,) + a.data.shape), parents=(a,), op="expand0")
    if out.requires_grad:

        def bw(g, flow):
            _acc(flow, a, g.sum(axis=0))

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a, axis=None, keepdims=False):
    out_data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    out = Tensor(out_data, parents=(a,), op="sum")
    if out.requires_grad:
        shape = a.data.shape

        def bw(g, flow):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            _acc(flow, a, np.broadcast_to(gg, shape))

        out._backward = bw
    return out


def tensor_mean(a, axis=None, keepdims=False):
    out_data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    out = Tensor(out_data, parents=(a,), op="mean")
    if out.requires_grad:
        shape = a.data.shape
        denom = a.data.size / out_data.size

        def bw(g, flow):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            _acc(flow, a, np.broadcast_to(gg, shape) / denom)

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalizers


def softmax(x, axis=-1):
    """Row-stochastic normalizer along `axis`, max-subtracted for stability."""
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.data.shape}")
    ax = axis % nd
    m = x.data.max(axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(y, parents=(x,), op="softmax")
    if out.requires_grad:

        def bw(g, flow):
            dot = (g * y).sum(axis=ax, keepdims=True)
            _acc(flow, x, y * (g - dot))

        out._backward = bw
    return out


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layernorm eps must be > 0, got {eps}")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layernorm gain/bias must have shape ({d},), got {gain.data.shape} / {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, parents=(x, gain, bias), op="layernorm")
    if out.requires_grad:

        def bw(g, flow):
            if gain.requires_grad:
                _acc(flow, gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                _acc(flow, bias, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                dxh = g * gain.data
                m1 = dxh.mean(axis=-1, keepdims=True)
                m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
                _acc(flow, x, inv * (dxh - m1 - xhat * m2))

        out._backward = bw
    return out


def gelu(x):
    """tanh-approximated GELU with fixed coefficients."""
    xd = x.data
    c1 = np.asarray(GELU_COEF_SQRT_2_OVER_PI, dtype=xd.dtype)
    c2 = np.asarray(GELU_COEF_CUBIC, dtype=xd.dtype)
    u = c1 * (xd + c2 * xd * xd * xd)
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t), parents=(x,), op="gelu")
    if out.requires_grad:

        def bw(g, flow):
            du = c1 * (1.0 + 3.0 * c2 * xd * xd)
            dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
            _acc(flow, x, g * dy)

        out._backward = bw
    return out


def sigmoid(x):
    y = _sigmoid_np(x.data)
    out = Tensor(y, parents=(x,), op="sigmoid")
    if out.requires_grad:

        def bw(g, flow):
            _acc(flow, x, g * y * (1.0 - y))

        out._backward = bw
    return out


def _sigmoid_np(x):
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def softplus(x):
    """log(1 + exp(x)) in the overflow-safe form max(x,0) + log1p(exp(-|x|))."""
    xd = x.data
    out = Tensor(np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd))), parents=(x,), op="softplus")
    if out.requires_grad:

        def bw(g, flow):
            _acc(flow, x, g * _sigmoid_np(xd))

        out._backward = bw
    return out


def log(x):
    out = Tensor(np.log(x.data), parents=(x,), op="log")
    if out.requires_grad:

        def bw(g, flow):
            _acc(flow, x, g / x.data)

        out._backward = bw
    return out


def linear(x, w, b):
    """Affine map: x @ w + b."""
    return add(matmul(x, w), b)
