"""Dense tensors with reverse-mode automatic differentiation.

Everything in this package computes on :class:`DiffTensor`, a thin wrapper
around a numpy array that records a computation graph on the fly. Calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates gradients into the leaves that were created with
``requires_grad=True``.

Conventions:

* Tensors are immutable after creation, except for the ``grad`` buffer and
  in-place parameter updates performed by the optimizer between graphs.
* ``backward()`` may be called once per graph. A second backward through any
  already-consumed node raises :class:`GraphConsumedError` (a double-backward
  almost always means a training-loop bug). Gradients of the *leaves* do
  accumulate across separate graphs until cleared.
* Default dtype is float32. Gradient-check code should build float64 tensors;
  every op preserves the dtype of its inputs.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special as _special

__all__ = [
    "DiffTensor",
    "GraphConsumedError",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "randn",
    "concat",
    "minimum",
    "clip",
    "gelu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layer_norm",
    "cross_entropy",
    "no_grad",
    "grad_enabled",
]

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class GraphConsumedError(RuntimeError):
    """Raised when backward() traverses a graph that was already consumed."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # Extra leading axes introduced by broadcasting.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # Axes that were size 1 in the original and got stretched.
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class DiffTensor:
    """A dense n-dimensional real array participating in autodiff.

    The flat row-major buffer lives in ``data`` (a C-contiguous numpy array);
    ``grad`` mirrors its shape once backward has run.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self._consumed = False

    # -- basic introspection ------------------------------------------------

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- graph plumbing -----------------------------------------------------

    def detach(self) -> "DiffTensor":
        """Same values, severed from the graph. Shares the data buffer."""
        return DiffTensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar; grads land on requiring leaves."""
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")

        topo: list[DiffTensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                if node._consumed:
                    raise GraphConsumedError(
                        "backward() through an already-consumed graph; build a "
                        "fresh forward pass instead"
                    )
                node._consumed = True
                for parent, pg in node._vjp(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g

    # -- op construction helper ----------------------------------------------

    @staticmethod
    def _make(data, parents, vjp):
        req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if req:
            return DiffTensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
        return DiffTensor(data)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        out = a.data + b.data
        return DiffTensor._make(
            out, (a, b),
            lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        out = a.data - b.data
        return DiffTensor._make(
            out, (a, b),
            lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))),
        )

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        out = a.data * b.data
        return DiffTensor._make(
            out, (a, b),
            lambda g: (
                (a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        out = a.data / b.data
        return DiffTensor._make(
            out, (a, b),
            lambda g: (
                (a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
            ),
        )

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __neg__(self):
        a = self
        return DiffTensor._make(-a.data, (a,), lambda g: ((a, -g),))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a, n = self, float(exponent)
        out = a.data ** n
        return DiffTensor._make(
            out, (a,), lambda g: ((a, g * n * a.data ** (n - 1.0)),)
        )

    def __matmul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
        try:
            out = a.data @ b.data
        except ValueError as exc:
            raise ShapeError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from exc

        def vjp(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

        return DiffTensor._make(out, (a, b), vjp)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = a.data.reshape(shape)
        return DiffTensor._make(out, (a,), lambda g: ((a, g.reshape(a.shape)),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        out = a.data.transpose(axes)
        return DiffTensor._make(out, (a,), lambda g: ((a, g.transpose(inv)),))

    def swapaxes(self, ax1, ax2):
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(tuple(axes))

    def __getitem__(self, key):
        a = self
        out = a.data[key]

        def vjp(g):
            full = np.zeros_like(a.data)
            full[key] = g  # basic slicing only: each source element hit once
            return ((a, full),)

        return DiffTensor._make(out, (a,), vjp)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            g = np.asarray(g)
            if axis is None:
                return ((a, np.broadcast_to(g, a.shape).astype(a.dtype)),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, a.shape).astype(a.dtype)),)

        return DiffTensor._make(out, (a,), vjp)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- pointwise -----------------------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)
        return DiffTensor._make(out, (a,), lambda g: ((a, g * out),))

    def log(self):
        a = self
        out = np.log(a.data)
        return DiffTensor._make(out, (a,), lambda g: ((a, g / a.data),))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return DiffTensor._make(out, (a,), lambda g: ((a, g * 0.5 / out),))

    def sigmoid(self):
        a = self
        out = _special.expit(a.data)
        return DiffTensor._make(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))

    def erf(self):
        a = self
        out = _special.erf(a.data)
        c = 2.0 / math.sqrt(math.pi)
        return DiffTensor._make(
            out, (a,), lambda g: ((a, g * c * np.exp(-a.data * a.data)),)
        )

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return DiffTensor._make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


# -- constructors -------------------------------------------------------------


def _as_tensor(x, dtype) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> DiffTensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(dtype or DEFAULT_DTYPE)
    return DiffTensor(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> DiffTensor:
    return DiffTensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> DiffTensor:
    return DiffTensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std=1.0, requires_grad=False,
          dtype=DEFAULT_DTYPE) -> DiffTensor:
    return DiffTensor(
        (rng.standard_normal(shape) * std).astype(dtype), requires_grad=requires_grad
    )


# -- free-function ops ---------------------------------------------------------


def concat(tensors, axis=0) -> DiffTensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pairs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pairs.append((t, g[tuple(idx)]))
        return tuple(pairs)

    return DiffTensor._make(out, tuple(tensors), vjp)


def minimum(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a = _as_tensor(a, DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    out = np.minimum(a.data, b.data)
    mask = a.data <= b.data  # ties route through the first operand

    def vjp(g):
        return (
            (a, _unbroadcast(g * mask, a.shape)),
            (b, _unbroadcast(g * ~mask, b.shape)),
        )

    return DiffTensor._make(out, (a, b), vjp)


def clip(x: DiffTensor, lo: float, hi: float) -> DiffTensor:
    a = x
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return DiffTensor._make(out, (a,), lambda g: ((a, g * mask),))


def gelu(x: DiffTensor) -> DiffTensor:
    """Exact erf-based GELU."""
    return 0.5 * x * (1.0 + (x * (1.0 / math.sqrt(2.0))).erf())


def softmax(x: DiffTensor, axis: int = -1) -> DiffTensor:
    """Stable softmax along `axis` (max-subtracted)."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shift = DiffTensor(x.data.max(axis=axis, keepdims=True))  # constant: no grad
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x: DiffTensor, axis: int = -1, keepdims: bool = False) -> DiffTensor:
    shift = DiffTensor(x.data.max(axis=axis, keepdims=True))
    out = (x - shift).exp().sum(axis=axis, keepdims=True).log() + shift
    if not keepdims:
        out = out.reshape(tuple(s for i, s in enumerate(out.shape)
                                if i != (axis % x.ndim)))
    return out


def log_softmax(x: DiffTensor, axis: int = -1) -> DiffTensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    return x - logsumexp(x, axis=axis, keepdims=True)


def layer_norm(x: DiffTensor, gamma: DiffTensor, beta: DiffTensor,
               eps: float = 1e-5) -> DiffTensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match "
            f"feature dim {d}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gamma + beta


def cross_entropy(logits: DiffTensor, target: np.ndarray | DiffTensor,
                  reduction: str = "mean") -> DiffTensor:
    """−Σ target · log softmax(logits) over the last axis.

    `target` is a distribution per row (one-hot for hard labels, soft for
    MixUp); rows must sum to 1.
    """
    tgt = target.data if isinstance(target, DiffTensor) else np.asarray(target)
    if tgt.shape != logits.shape:
        raise ShapeError(f"target shape {tgt.shape} != logits shape {logits.shape}")
    sums = tgt.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise ValueError("cross_entropy target rows must sum to 1")
    losses = -(DiffTensor(tgt.astype(logits.dtype)) * log_softmax(logits, axis=-1)).sum(axis=-1)
    if reduction == "mean":
        return losses.mean()
    if reduction == "none":
        return losses
    raise ValueError(f"unknown reduction {reduction!r}")
