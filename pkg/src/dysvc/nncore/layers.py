"""Parameters, modules and the Transformer building blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class DimensionError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class Parameter(Tensor):
    """A leaf tensor owned by a module.  ``trainable=False`` freezes it."""

    __slots__ = ("name", "_trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype or T.get_default_dtype())
        self.name = name
        self._trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


class Module:
    """Container that discovers parameters and submodules through attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_dict(self) -> dict[str, Parameter]:
        params = {}
        for name, p in self.named_parameters():
            if name in params:
                raise ValueError(f"duplicate parameter name {name!r}")
            p.name = name
            params[name] = p
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.trainable = not flag
        return self

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.param_dict().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.param_dict()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(glorot(rng, in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"expected last dim {self.weight.shape[0]}, got {x.shape[-1]}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, scale: float = 0.1):
        self.weight = Parameter(rng.normal(0.0, scale, size=(count, dim)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.weight.shape[0]):
            raise IndexError(f"embedding index out of range [0, {self.weight.shape[0]})")
        return self.weight[ids]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps) * gain + bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """softmax(q kᵀ / √d) v over the last two axes.

    ``mask`` is boolean, broadcastable to ``(..., Tq, Tk)``; True marks an
    allowed query/key pair.  Every query row must keep at least one key.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    if q.shape[-1] < 1:
        raise DimensionError("attention needs d >= 1")
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateMaskError("attention mask leaves a query row with no keys")
    weights = T.softmax(scores, axis=-1, mask=mask)
    out = weights @ v
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise DimensionError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng, bias=False)  # a key bias only shifts each score row
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, memory: Tensor, mask=None, return_weights: bool = False):
        """Attend ``query (B, Tq, D)`` over ``memory (B, Tk, D)``.

        With ``return_weights`` the per-head weights ``(B, H, Tq, Tk)`` are
        returned as well.
        """
        b, tq, d = query.shape
        q = self._split(self.wq(query))
        k = self._split(self.wk(memory))
        v = self._split(self.wv(memory))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[:, None] if np.ndim(mask) == 3 else mask
        ctx, weights = scaled_dot_attention(q, k, v, mask, return_weights=True)
        out = self.wo(ctx.transpose(0, 2, 1, 3).reshape(b, tq, d))
        return (out, weights) if return_weights else out


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def sinusoid_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return table.astype(dtype)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))
