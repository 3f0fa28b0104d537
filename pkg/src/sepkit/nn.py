"""Layers, transformer blocks, and the AdamW optimizer.

Everything is built from the primitives in :mod:`sepkit.tensor`. Modules hold
their parameters as ``Tensor`` attributes; ``parameters()`` walks attributes
(and lists of sub-modules) in construction order, so parameter names are
stable across runs and usable as checkpoint keys. Non-trainable state (EMA
codebooks, frozen weights) is still reachable through ``tensors()``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError, TrainingDivergence
from .tensor import Tensor

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "Embedding",
    "Conv1d",
    "ConvTranspose1d",
    "Conv2d",
    "MultiHeadAttention",
    "TransformerBlock",
    "TransformerStack",
    "LoraAdapter",
    "AdamW",
    "xavier_uniform",
    "sinusoid_positions",
    "causal_bias",
]


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def sinusoid_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position grid (length, dim); dim must be even."""
    if dim % 2:
        raise ShapeError(f"sinusoid_positions: dim must be even, got {dim}")
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-np.log(10000.0) / dim))
    grid = np.zeros((length, dim))
    grid[:, 0::2] = np.sin(pos * div)
    grid[:, 1::2] = np.cos(pos * div)
    return grid


def causal_bias(length: int) -> np.ndarray:
    """Additive attention bias masking future positions."""
    bias = np.zeros((length, length))
    bias[np.triu_indices(length, k=1)] = -1e9
    return bias


class Module:
    """Minimal container: tensors and sub-modules found by attribute walk."""

    def _walk(self, prefix: str, trainable_only: bool, out: dict[str, Tensor]) -> None:
        for name, val in vars(self).items():
            key = prefix + name
            if isinstance(val, Tensor):
                if val.requires_grad or not trainable_only:
                    out[key] = val
            elif isinstance(val, Module):
                val._walk(key + ".", trainable_only, out)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        item._walk(f"{key}.{i}.", trainable_only, out)
                    elif isinstance(item, Tensor):
                        if item.requires_grad or not trainable_only:
                            out[f"{key}.{i}"] = item

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors keyed by dotted attribute path."""
        out: dict[str, Tensor] = {}
        self._walk("", True, out)
        return out

    def tensors(self) -> dict[str, Tensor]:
        """All tensors (trainable or not) keyed by dotted attribute path."""
        out: dict[str, Tensor] = {}
        self._walk("", False, out)
        return out

    def set_tensor(self, name: str, value: Tensor) -> None:
        """Replace the tensor object at a dotted path (used by grad checks)."""
        parts = name.split(".")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        last = parts[-1]
        if isinstance(obj, list):
            obj[int(last)] = value
        else:
            setattr(obj, last, value)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy stored arrays into this module's tensors (names must match)."""
        own = self.tensors()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ShapeError(f"load_arrays: missing={missing[:4]} extra={extra[:4]}")
        for name, tens in own.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tens.data.shape:
                raise ShapeError(
                    f"load_arrays: {name} shape {arr.shape} != {tens.data.shape}"
                )
            tens.data = arr.copy()

    def freeze(self) -> None:
        for tens in self.tensors().values():
            tens.requires_grad = False


class Linear(Module):
    """Affine map x @ W + b with an optional low-rank adapter."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(xavier_uniform(rng, (d_in, d_out), d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.adapter: LoraAdapter | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.adapter is not None:
            y = T.add(y, self.adapter(x))
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class LoraAdapter(Module):
    """Low-rank residual: scale * (x @ down @ up).

    ``down`` starts small and random, ``up`` starts at zero, so a fresh
    adapter leaves the wrapped layer's output bit-identical.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, rng: np.random.Generator,
                 scale: float = 2.0):
        self.down = Tensor(rng.normal(0.0, 1.0 / rank, size=(d_in, rank)), requires_grad=True)
        self.up = Tensor(np.zeros((rank, d_out)), requires_grad=True)
        self.scale = float(scale)

    def __call__(self, x: Tensor) -> Tensor:
        return T.mul(T.matmul(T.matmul(x, self.down), self.up), self.scale)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        self.weight = Tensor(xavier_uniform(rng, (count, dim), count, dim), requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        fan_in, fan_out = c_in * kernel, c_out * kernel
        self.weight = Tensor(
            xavier_uniform(rng, (c_out, c_in, kernel), fan_in, fan_out), requires_grad=True
        )
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        fan_in, fan_out = c_in * kernel, c_out * kernel
        self.weight = Tensor(
            xavier_uniform(rng, (c_in, c_out, kernel), fan_in, fan_out), requires_grad=True
        )
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose1d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding
        )


class Conv2d(Module):
    """Stride-1 square-kernel 2-D convolution."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 padding: int = 1, bias: bool = True):
        fan = kernel * kernel
        self.weight = Tensor(
            xavier_uniform(rng, (c_out, c_in, kernel, kernel), c_in * fan, c_out * fan),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class MultiHeadAttention(Module):
    """Self-attention with separate q/k/v/out projections (LoRA targets)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"attention: dim {dim} not divisible by heads {heads}")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.heads = heads
        self.head_dim = dim // heads

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        b, t, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(z: Tensor) -> Tensor:
            return T.transpose(T.reshape(z, (b, t, h, hd)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        if bias is not None:
            scores = T.add(scores, bias)
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.out(merged)


class TransformerBlock(Module):
    """Pre-LN block: attention and GELU feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, dim, rng)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), bias))
        return T.add(x, self.ff2(T.gelu(self.ff1(self.ln2(x)))))


class TransformerStack(Module):
    """Stack of blocks with a final layer norm.

    ``causal=True`` applies a cached lower-triangular bias; a caller-supplied
    bias is added on top (e.g. padding masks).
    """

    def __init__(self, dim: int, heads: int, ff_dim: int, layers: int,
                 rng: np.random.Generator, causal: bool = False):
        self.blocks = [TransformerBlock(dim, heads, ff_dim, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)
        self.causal = causal
        self._bias_cache: dict[int, np.ndarray] = {}

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        t = x.shape[-2]
        total = bias
        if self.causal:
            cached = self._bias_cache.get(t)
            if cached is None:
                cached = causal_bias(t)
                if len(self._bias_cache) > 8:
                    self._bias_cache.clear()
                self._bias_cache[t] = cached
            total = cached if total is None else total + cached
        for block in self.blocks:
            x = block(x, total)
        return self.norm(x)


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments.

    Learning rate ramps linearly over ``warmup_steps`` then stays flat.
    Raises :class:`TrainingDivergence` on non-finite gradients.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, warmup_steps: int = 0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self) -> float:
        if self.warmup_steps and self.step_count < self.warmup_steps:
            return self.lr * (self.step_count + 1) / self.warmup_steps
        return self.lr

    def step(self) -> None:
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"non-finite gradient in '{name}' at step {t}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.asarray([float(self.step_count)])}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out
