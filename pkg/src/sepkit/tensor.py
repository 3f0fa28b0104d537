"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray and records, for every operation whose inputs
require gradients, a backward closure plus parent links. ``backward`` walks
the recorded graph once in reverse topological order. The primitive set is
fixed and small: elementwise arithmetic and activations, matmul, shape ops,
reductions, gathers, convolutions, normalizations, fused softmax losses, and
a linear STFT/iSTFT pair. Everything else in the package is composed from
these, so a finite-difference check over the primitives covers the whole
training stack.

Gradients are accumulated (``+=``) so shared subexpressions and parameter
reuse are handled naturally. All data is float64; integer index arrays are
passed around as plain numpy arrays, not tensors.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "finite_difference_check",
    "forward_backward",
]

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph machinery -----------------------------------------------------

    def backward(self, free_graph: bool = True) -> None:
        """Backpropagate from this scalar through the recorded graph.

        ``free_graph=True`` (the default) drops each node's closure and parent
        links once its gradient has been propagated, so the whole graph is
        reclaimed by reference counting the moment the caller lets go of it.
        Node closures capture their output tensor, a reference cycle the
        garbage collector breaks too slowly for training-sized graphs. Pass
        ``free_graph=False`` to keep the graph for a second backward pass.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and (p.requires_grad or p._parents):
                    stack.append((p, False))
        # grads allocate lazily on first contribution (see _acc); every node
        # in topo has at least one consumer here, so none is left as None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            if free_graph:
                node._backward = None
                node._parents = ()

    # -- operator sugar ------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _promote(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tracked(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _wants(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _acc(t: Tensor, g: np.ndarray, own: bool) -> None:
    """Add a gradient contribution to ``t.grad``, allocating lazily.

    ``own=True`` promises ``g`` is a dead temporary (nothing else will read
    it), so the first contribution can take the buffer outright instead of
    paying a zero-fill plus add. Arrays that alias a consumer's grad must
    pass ``own=False``; they are copied on first contact.
    """
    if t.grad is None:
        if own and g.shape == t.data.shape and g.dtype == t.data.dtype:
            t.grad = g
        elif g.shape == t.data.shape:
            t.grad = g.astype(t.data.dtype)
        else:
            t.grad = np.zeros_like(t.data)
            t.grad += g
    else:
        t.grad += g


def _grad_buf(t: Tensor) -> np.ndarray:
    """Zero-filled grad buffer for backwards that scatter into slices."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    data = a.data + b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward():
        og = out.grad
        if _wants(a):
            ga = _unbroadcast(og, a.data.shape)
            _acc(a, ga, ga is not og)
        if _wants(b):
            gb = _unbroadcast(og, b.data.shape)
            _acc(b, gb, gb is not og)

    out = _make(data, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    data = a.data - b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward():
        og = out.grad
        if _wants(a):
            ga = _unbroadcast(og, a.data.shape)
            _acc(a, ga, ga is not og)
        if _wants(b):
            gb = _unbroadcast(og, b.data.shape)
            if b.grad is not None:
                b.grad -= gb
            else:
                b.grad = -gb

    out = _make(data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    data = a.data * b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward():
        if _wants(a):
            _acc(a, _unbroadcast(out.grad * b.data, a.data.shape), True)
        if _wants(b):
            _acc(b, _unbroadcast(out.grad * a.data, b.data.shape), True)

    out = _make(data, (a, b), backward)
    return out


def div(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    data = a.data / b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward():
        if _wants(a):
            _acc(a, _unbroadcast(out.grad / b.data, a.data.shape), True)
        if _wants(b):
            _acc(b, _unbroadcast(-out.grad * data / b.data, b.data.shape), True)

    out = _make(data, (a, b), backward)
    return out


def powc(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _promote(a)
    data = a.data ** exponent
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _acc(a, out.grad * exponent * a.data ** (exponent - 1.0), True)

    out = _make(data, (a,), backward)
    return out


def square(a) -> Tensor:
    a = _promote(a)
    data = a.data * a.data
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _acc(a, out.grad * 2.0 * a.data, True)

    out = _make(data, (a,), backward)
    return out


def exp(a) -> Tensor:
    a = _promote(a)
    data = np.exp(a.data)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _acc(a, out.grad * data, True)

    out = _make(data, (a,), backward)
    return out


def log(a) -> Tensor:
    a = _promote(a)
    data = np.log(a.data)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _acc(a, out.grad / a.data, True)

    out = _make(data, (a,), backward)
    return out


def sqrt(a) -> Tensor:
    a = _promote(a)
    data = np.sqrt(a.data)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _acc(a, out.grad * 0.5 / data, True)

    out = _make(data, (a,), backward)
    return out


def tabs(a) -> Tensor:
    """Elementwise absolute value (sign subgradient at zero)."""
    a = _promote(a)
    data = np.abs(a.data)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _acc(a, out.grad * np.sign(a.data), True)

    out = _make(data, (a,), backward)
    return out


def tanh(a) -> Tensor:
    a = _promote(a)
    data = np.tanh(a.data)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _acc(a, out.grad * (1.0 - data * data), True)

    out = _make(data, (a,), backward)
    return out


def sigmoid(a) -> Tensor:
    a = _promote(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _acc(a, out.grad * data * (1.0 - data), True)

    out = _make(data, (a,), backward)
    return out


def relu(a) -> Tensor:
    a = _promote(a)
    data = np.maximum(a.data, 0.0)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _acc(a, out.grad * (a.data > 0.0), True)

    out = _make(data, (a,), backward)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    a = _promote(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf
    if not _tracked(a):
        return Tensor(data)

    def backward():
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _acc(a, out.grad * (cdf + a.data * pdf), True)

    out = _make(data, (a,), backward)
    return out


def stop_gradient(a) -> Tensor:
    """Forward identity that blocks the backward pass (straight-through)."""
    a = _promote(a)
    return Tensor(a.data)


# -- matmul and shape ops -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    # batched @ 2-D (every dense layer) flattens to a single GEMM; numpy
    # would otherwise loop the batch dims one small product at a time
    flat = b.data.ndim == 2 and a.data.ndim > 2
    if flat:
        a2 = np.ascontiguousarray(a.data).reshape(-1, a.data.shape[-1])
        data = (a2 @ b.data).reshape(a.data.shape[:-1] + (b.data.shape[-1],))
    else:
        data = a.data @ b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward():
        if flat:
            og2 = np.ascontiguousarray(out.grad).reshape(-1, b.data.shape[-1])
            if _wants(a):
                _acc(a, (og2 @ b.data.T).reshape(a.data.shape), True)
            if _wants(b):
                _acc(b, a2.T @ og2, True)
            return
        if _wants(a):
            ga = out.grad @ np.swapaxes(b.data, -1, -2)
            _acc(a, _unbroadcast(ga, a.data.shape), True)
        if _wants(b):
            gb = np.swapaxes(a.data, -1, -2) @ out.grad
            _acc(b, _unbroadcast(gb, b.data.shape), True)

    out = _make(data, (a, b), backward)
    return out


def reshape(a, shape) -> Tensor:
    a = _promote(a)
    data = a.data.reshape(shape)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        # reshape of out.grad aliases it, so the contribution is not ours
        _acc(a, out.grad.reshape(a.data.shape), False)

    out = _make(data, (a,), backward)
    return out


def transpose(a, axes) -> Tensor:
    a = _promote(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    if not _tracked(a):
        return Tensor(data)
    inverse = tuple(np.argsort(axes))

    def backward():
        _acc(a, np.transpose(out.grad, inverse), False)

    out = _make(data, (a,), backward)
    return out


def swap_axes(a, ax1: int, ax2: int) -> Tensor:
    a = _promote(a)
    axes = list(range(a.data.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def index(a, key) -> Tensor:
    """Basic slicing (slices, ints, Ellipsis). Backward scatters into zeros."""
    a = _promote(a)
    data = a.data[key]
    if not _tracked(a):
        return Tensor(data)

    def backward():
        _grad_buf(a)[key] += out.grad

    out = _make(np.ascontiguousarray(data), (a,), backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_promote(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return Tensor(data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _wants(t):
                sl = [slice(None)] * data.ndim
                sl[axis] = slice(lo, hi)
                _acc(t, out.grad[tuple(sl)], False)

    out = _make(data, tuple(tensors), backward)
    return out


def pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    a = _promote(a)
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    data = np.pad(a.data, widths)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(before, before + a.data.shape[axis])
        _acc(a, out.grad[tuple(sl)], False)

    out = _make(data, (a,), backward)
    return out


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _promote(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        # broadcast_to is a read-only alias of out.grad
        _acc(a, np.broadcast_to(g, a.data.shape), False)

    out = _make(data, (a,), backward)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _promote(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(data)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape) / count, True)

    out = _make(data, (a,), backward)
    return out


# -- gathers -------------------------------------------------------------------


def take(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Index-select along ``axis``; duplicate indices accumulate in backward."""
    a = _promote(a)
    indices = np.asarray(indices)
    data = np.take(a.data, indices, axis=axis)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        np.add.at(_grad_buf(a), (slice(None),) * axis + (indices,), out.grad)

    out = _make(data, (a,), backward)
    return out


def embedding(weight, ids: np.ndarray) -> Tensor:
    """Row lookup: weight (V, D), ids any integer shape -> (*ids.shape, D)."""
    weight = _promote(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {weight.data.shape[0]}) "
            f"(got min {ids.min()}, max {ids.max()})"
        )
    data = weight.data[ids]
    if not _tracked(weight):
        return Tensor(data)
    flat_ids = ids.reshape(-1)

    def backward():
        np.add.at(_grad_buf(weight), flat_ids, out.grad.reshape(-1, weight.data.shape[1]))

    out = _make(data, (weight,), backward)
    return out


# -- fused normalizations and losses --------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _promote(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    if not _tracked(a):
        return Tensor(data)

    def backward():
        dot = (out.grad * data).sum(axis=axis, keepdims=True)
        _acc(a, data * (out.grad - dot), True)

    out = _make(data, (a,), backward)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _promote(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    if not _tracked(a):
        return Tensor(data)

    def backward():
        gsum = out.grad.sum(axis=axis, keepdims=True)
        _acc(a, out.grad - np.exp(data) * gsum, True)

    out = _make(data, (a,), backward)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _promote(x), _promote(gamma), _promote(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data
    if not _tracked(x, gamma, beta):
        return Tensor(data)

    def backward():
        g = out.grad
        if _wants(gamma):
            _acc(gamma, _unbroadcast(g * xhat, gamma.data.shape), True)
        if _wants(beta):
            gb = _unbroadcast(g, beta.data.shape)
            _acc(beta, gb, gb is not g)
        if _wants(x):
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (gx - m1 - xhat * m2), True)

    out = _make(data, (x, gamma, beta), backward)
    return out


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood.

    logits (N, V), targets (N,) int, weights (N,) nonnegative or None.
    Returns sum(w_i * nll_i) / sum(w_i); positions with zero weight receive
    exactly zero gradient.
    """
    logits = _promote(logits)
    targets = np.asarray(targets)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"cross_entropy: target id out of range [0, {v})")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    wsum = weights.sum()
    if wsum <= 0.0:
        raise ShapeError("cross_entropy: weights sum to zero")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(n), targets]
    data = np.asarray((nll * weights).sum() / wsum)
    if not _tracked(logits):
        return Tensor(data)

    def backward():
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        _acc(logits, out.grad * p * (weights / wsum)[:, None], True)

    out = _make(data, (logits,), backward)
    return out


# -- convolutions ----------------------------------------------------------------


def _conv1d_cols(xp: np.ndarray, kernel: int, stride: int, length_out: int) -> np.ndarray:
    """Strided view (B, C, K, L) over a padded (B, C, T) input."""
    b, c, _ = xp.shape
    sb, sc, st = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, kernel, length_out), strides=(sb, sc, st, st * stride)
    )


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution: x (B, Cin, T), weight (Cout, Cin, K) -> (B, Cout, L)."""
    x, weight = _promote(x), _promote(weight)
    if x.data.ndim != 3 or weight.data.ndim != 3 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.data.shape} and {weight.data.shape}")
    b, cin, t = x.data.shape
    cout, _, k = weight.data.shape
    length_out = (t + 2 * padding - k) // stride + 1
    if length_out <= 0:
        raise ShapeError(f"conv1d: input length {t} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = _conv1d_cols(xp, k, stride, length_out).reshape(b, cin * k, length_out)
    w2 = weight.data.reshape(cout, cin * k)
    data = np.einsum("ok,bkl->bol", w2, cols, optimize=True)
    if bias is not None:
        bias = _promote(bias)
        data = data + bias.data[None, :, None]
    tracked = _tracked(x, weight) or (bias is not None and _tracked(bias))
    if not tracked:
        return Tensor(data)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        g = out.grad
        if bias is not None and _wants(bias):
            _acc(bias, g.sum(axis=(0, 2)), True)
        if _wants(weight):
            gw = np.einsum("bol,bkl->ok", g, cols, optimize=True)
            _acc(weight, gw.reshape(cout, cin, k), True)
        if _wants(x):
            gcols = np.einsum("ok,bol->bkl", w2, g, optimize=True).reshape(b, cin, k, length_out)
            gxp = np.zeros((b, cin, t + 2 * padding))
            for kk in range(k):
                gxp[:, :, kk : kk + length_out * stride : stride] += gcols[:, :, kk, :]
            _acc(x, gxp[:, :, padding : padding + t] if padding else gxp, True)

    out = _make(data, parents, backward)
    return out


def conv_transpose1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 1-D convolution: x (B, Cin, L), weight (Cin, Cout, K).

    Output length is (L - 1) * stride + K - 2 * padding (the adjoint of
    ``conv1d`` with the same stride/padding).
    """
    x, weight = _promote(x), _promote(weight)
    if x.data.ndim != 3 or weight.data.ndim != 3 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"conv_transpose1d: incompatible shapes {x.data.shape} and {weight.data.shape}"
        )
    b, cin, l = x.data.shape
    _, cout, k = weight.data.shape
    t_full = (l - 1) * stride + k
    t_out = t_full - 2 * padding
    if t_out <= 0:
        raise ShapeError(f"conv_transpose1d: output length {t_out} <= 0")
    full = np.zeros((b, cout, t_full))
    contrib = np.einsum("iok,bil->bokl", weight.data, x.data, optimize=True)
    for kk in range(k):
        full[:, :, kk : kk + l * stride : stride] += contrib[:, :, kk, :]
    data = full[:, :, padding : padding + t_out]
    if bias is not None:
        bias = _promote(bias)
        data = data + bias.data[None, :, None]
    tracked = _tracked(x, weight) or (bias is not None and _tracked(bias))
    if not tracked:
        return Tensor(data)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        gfull = np.zeros((b, cout, t_full))
        gfull[:, :, padding : padding + t_out] = out.grad
        gslices = np.empty((b, cout, k, l))
        for kk in range(k):
            gslices[:, :, kk, :] = gfull[:, :, kk : kk + l * stride : stride]
        if bias is not None and _wants(bias):
            _acc(bias, out.grad.sum(axis=(0, 2)), True)
        if _wants(weight):
            _acc(weight, np.einsum("bokl,bil->iok", gslices, x.data, optimize=True), True)
        if _wants(x):
            _acc(x, np.einsum("iok,bokl->bil", weight.data, gslices, optimize=True), True)

    out = _make(data, parents, backward)
    return out


def conv2d(x, weight, bias=None, padding: int = 1) -> Tensor:
    """Stride-1 2-D convolution: x (B, C, H, W), weight (O, C, KH, KW)."""
    x, weight = _promote(x), _promote(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.data.shape} and {weight.data.shape}")
    b, c, h, w = x.data.shape
    o, _, kh, kw = weight.data.shape
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sb, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, kh, kw, ho, wo), strides=(sb, sc, sh, sw, sh, sw)
    ).reshape(b, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(o, c * kh * kw)
    data = np.einsum("ok,bkl->bol", w2, cols, optimize=True).reshape(b, o, ho, wo)
    if bias is not None:
        bias = _promote(bias)
        data = data + bias.data[None, :, None, None]
    tracked = _tracked(x, weight) or (bias is not None and _tracked(bias))
    if not tracked:
        return Tensor(data)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        g = out.grad.reshape(b, o, ho * wo)
        if bias is not None and _wants(bias):
            _acc(bias, out.grad.sum(axis=(0, 2, 3)), True)
        if _wants(weight):
            gw = np.einsum("bol,bkl->ok", g, cols, optimize=True)
            _acc(weight, gw.reshape(o, c, kh, kw), True)
        if _wants(x):
            gcols = np.einsum("ok,bol->bkl", w2, g, optimize=True)
            gcols = gcols.reshape(b, c, kh, kw, ho, wo)
            gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho, j : j + wo] += gcols[:, :, i, j, :, :]
            _acc(x, gxp[:, :, padding : padding + h, padding : padding + w], True)

    out = _make(data, parents, backward)
    return out


# -- framing (overlapped chunk/unfold with scatter-add inverse) -------------------


def unfold(x, size: int, hop: int, axis: int = -1) -> Tensor:
    """Gather overlapping windows along ``axis``: length L -> (N, size).

    N = 1 + (L - size) // hop full windows; the tail beyond the last full
    window is dropped. The windowed axis expands into two trailing axes when
    ``axis`` is last: (..., L) -> (..., N, size).
    """
    x = _promote(x)
    axis = axis % x.data.ndim
    length = x.data.shape[axis]
    if length < size:
        raise ShapeError(f"unfold: axis length {length} < window {size}")
    n = 1 + (length - size) // hop
    starts = np.arange(n) * hop
    idx = starts[:, None] + np.arange(size)[None, :]
    moved = np.moveaxis(x.data, axis, -1)
    data = moved[..., idx]
    data = np.moveaxis(data, (-2, -1), (axis, axis + 1))
    if not _tracked(x):
        return Tensor(data)

    def backward():
        g = np.moveaxis(out.grad, (axis, axis + 1), (-2, -1))
        gm = np.zeros(moved.shape)
        np.add.at(gm, (..., idx), g)
        _acc(x, np.moveaxis(gm, -1, axis), True)

    out = _make(np.ascontiguousarray(data), (x,), backward)
    return out


def fold(x, hop: int, length: int, axis: int = -2) -> Tensor:
    """Overlap-add the inverse of ``unfold``: (..., N, size) -> (..., length)."""
    x = _promote(x)
    axis = axis % x.data.ndim
    n, size = x.data.shape[axis], x.data.shape[axis + 1]
    if (n - 1) * hop + size > length:
        raise ShapeError(f"fold: windows overrun target length {length}")
    starts = np.arange(n) * hop
    idx = starts[:, None] + np.arange(size)[None, :]
    moved = np.moveaxis(x.data, (axis, axis + 1), (-2, -1))
    data = np.zeros(moved.shape[:-2] + (length,))
    np.add.at(data, (..., idx), moved)
    data = np.moveaxis(data, -1, axis)
    if not _tracked(x):
        return Tensor(data)

    def backward():
        g = np.moveaxis(out.grad, axis, -1)
        gx = g[..., idx]
        _acc(x, np.moveaxis(gx, (-2, -1), (axis, axis + 1)), True)

    out = _make(data, (x,), backward)
    return out


# -- linear spectral transforms ---------------------------------------------------

# rfft bin multiplicity: DC and Nyquist appear once in the real signal's
# spectrum, interior bins twice (conjugate pairs).
def _bin_weights(frame: int) -> np.ndarray:
    w = np.full(frame // 2 + 1, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w


def wave_to_spec(x, frame: int, hop: int, window: np.ndarray) -> Tensor:
    """Windowed rfft of overlapping frames.

    x (..., T) -> (..., 2, N, F) with channel 0 the real part, channel 1 the
    imaginary part; N = 1 + (T - frame) // hop, F = frame // 2 + 1.
    """
    x = _promote(x)
    t = x.data.shape[-1]
    if t < frame:
        raise ShapeError(f"wave_to_spec: signal length {t} < frame {frame}")
    n = 1 + (t - frame) // hop
    starts = np.arange(n) * hop
    idx = starts[:, None] + np.arange(frame)[None, :]
    frames = x.data[..., idx] * window
    z = np.fft.rfft(frames, axis=-1)
    data = np.stack([z.real, z.imag], axis=-3)
    if not _tracked(x):
        return Tensor(data)
    alpha = _bin_weights(frame)

    def backward():
        gz = out.grad[..., 0, :, :] + 1j * out.grad[..., 1, :, :]
        # adjoint of rfft: frame x F -> frame samples
        gframes = np.fft.irfft(gz / alpha, n=frame, axis=-1) * frame * window
        gx = np.zeros(x.data.shape)
        np.add.at(gx, (..., idx), gframes)
        _acc(x, gx, True)

    out = _make(data, (x,), backward)
    return out


def spec_to_wave(spec, frame: int, hop: int, window: np.ndarray, length: int) -> Tensor:
    """Weighted overlap-add inverse of ``wave_to_spec``.

    spec (..., 2, N, F) -> (..., length). Frames are irfft'd, windowed,
    overlap-added, and divided by the summed squared window; positions the
    frames do not reach (or where the window stack is ~zero) come out 0.
    """
    spec = _promote(spec)
    n, f = spec.data.shape[-2], spec.data.shape[-1]
    if f != frame // 2 + 1:
        raise ShapeError(f"spec_to_wave: {f} bins incompatible with frame {frame}")
    covered = (n - 1) * hop + frame
    if covered > length:
        raise ShapeError(f"spec_to_wave: frames overrun target length {length}")
    starts = np.arange(n) * hop
    idx = starts[:, None] + np.arange(frame)[None, :]
    norm = np.zeros(length)
    np.add.at(norm, idx.reshape(-1), np.tile(window * window, n))
    safe = np.where(norm > 1e-8, norm, 1.0)
    live = norm > 1e-8

    z = spec.data[..., 0, :, :] + 1j * spec.data[..., 1, :, :]
    frames = np.fft.irfft(z, n=frame, axis=-1) * window
    ola = np.zeros(spec.data.shape[:-3] + (length,))
    np.add.at(ola, (..., idx), frames)
    data = np.where(live, ola / safe, 0.0)
    if not _tracked(spec):
        return Tensor(data)
    alpha = _bin_weights(frame)

    def backward():
        g = np.where(live, out.grad / safe, 0.0)
        gframes = g[..., idx] * window
        gz = np.fft.rfft(gframes, axis=-1) * (alpha / frame)
        _acc(spec, np.stack([gz.real, gz.imag], axis=-3), True)

    out = _make(data, (spec,), backward)
    return out


# -- gradient checking --------------------------------------------------------------


def finite_difference_check(scalar_fn, point: Tensor, epsilon: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    ``scalar_fn`` maps a Tensor to a scalar Tensor. Every coordinate of
    ``point`` is perturbed by +/- epsilon; returns the max over coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    probe = Tensor(point.data.copy(), requires_grad=True)
    loss = scalar_fn(probe)
    if loss.data.size != 1:
        raise ShapeError(f"finite_difference_check: fn returned shape {loss.data.shape}")
    loss.backward()
    analytic = probe.grad.copy()

    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(scalar_fn(probe).data)
            flat[i] = orig - epsilon
            lo = float(scalar_fn(probe).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * epsilon)
    numeric = numeric.reshape(point.data.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float((np.abs(analytic - numeric) / denom).max())


def forward_backward(scalar_fn, inputs: list[Tensor]):
    """Run ``scalar_fn(*inputs)``, backpropagate, and return (loss, grads)."""
    for t in inputs:
        t.grad = None
    loss = scalar_fn(*inputs)
    loss.backward()
    return loss, [t.grad for t in inputs]
