"""Small layer toolkit shared by the encoder and the gaze policy."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import DiffTensor

__all__ = ["Module", "Linear", "LayerNorm", "Mlp", "Attention"]


class Module:
    """Base class providing recursive, dot-named parameter collection."""

    def parameters(self) -> dict[str, DiffTensor]:
        out: dict[str, DiffTensor] = {}
        for attr, value in vars(self).items():
            if isinstance(value, DiffTensor):
                if value.is_leaf():
                    out[attr] = value
            elif isinstance(value, Module):
                for k, v in value.parameters().items():
                    out[f"{attr}.{k}"] = v
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for k, v in item.parameters().items():
                            out[f"{attr}.{i}.{k}"] = v
        return out

    def load_parameters(self, values: dict[str, np.ndarray], prefix: str = ""):
        """Copy arrays into existing parameters (shape-checked)."""
        params = self.parameters()
        for name, p in params.items():
            key = prefix + name
            if key not in values:
                raise KeyError(f"checkpoint missing parameter {key!r}")
            arr = np.asarray(values[key])
            if arr.shape != p.shape:
                raise ValueError(
                    f"shape mismatch for {key!r}: checkpoint {arr.shape} vs model {p.shape}"
                )
            p.data[...] = arr.astype(p.dtype)

    def set_requires_grad(self, flag: bool):
        for p in self.parameters().values():
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, rng: np.random.Generator, din: int, dout: int,
                 bias: bool = True, dtype=np.float32):
        std = 1.0 / math.sqrt(din)
        self.w = T.randn(rng, (din, dout), std=std, requires_grad=True, dtype=dtype)
        self.b = T.zeros((dout,), requires_grad=True, dtype=dtype) if bias else None

    def __call__(self, x: DiffTensor) -> DiffTensor:
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = T.ones((dim,), requires_grad=True, dtype=dtype)
        self.beta = T.zeros((dim,), requires_grad=True, dtype=dtype)
        self.eps = eps

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    """Two-layer GELU MLP."""

    def __init__(self, rng, din: int, hidden: int, dout: int, dtype=np.float32):
        self.fc1 = Linear(rng, din, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dout, dtype=dtype)

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product attention.

    Self-attention when called with one argument; cross-attention when the
    key/value source differs from the query source. No masking: every query
    attends to the full key set.
    """

    def __init__(self, rng, dim: int, heads: int, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim, dtype=dtype)
        self.wk = Linear(rng, dim, dim, dtype=dtype)
        self.wv = Linear(rng, dim, dim, dtype=dtype)
        self.wo = Linear(rng, dim, dim, dtype=dtype)

    def _split(self, x: DiffTensor, batch: tuple) -> DiffTensor:
        t = x.shape[-2]
        x = x.reshape(batch + (t, self.heads, self.head_dim))
        # (..., heads, tokens, head_dim)
        return x.swapaxes(-3, -2)

    def __call__(self, q_in: DiffTensor, kv_in: DiffTensor | None = None) -> DiffTensor:
        if kv_in is None:
            kv_in = q_in
        q = self._split(self.wq(q_in), q_in.shape[:-2])
        k = self._split(self.wk(kv_in), kv_in.shape[:-2])
        v = self._split(self.wv(kv_in), kv_in.shape[:-2])
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        ctx = attn @ v  # query/key batch dims may have broadcast against each other
        ctx = ctx.swapaxes(-3, -2)
        ctx = ctx.reshape(ctx.shape[:-2] + (self.heads * self.head_dim,))
        return self.wo(ctx)
