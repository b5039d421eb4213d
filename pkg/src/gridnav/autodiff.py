"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: each op stores a backward closure on its output, and
``backward`` replays the closures in reverse topological order.  The tape is
rebuilt on every forward pass; there is no graph reuse.  Gradients accumulate
additively into ``Tensor.grad``, and zeroing them between steps is the
caller's job (see ``zero_grad``).

Only the machinery a small decoder needs is implemented: 2-D matmul,
softmax, layer norm, cross entropy, row gather/concat/reshape, and the
elementwise basics with bias-style broadcasting.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A dense float64 array plus an optional node on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_ensure(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _ensure(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Iterable[Tensor], op: str, backward) -> Tensor:
    """Wrap an op result, attaching a tape node only when a parent needs it."""
    parents = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data, requires_grad=bool(parents))
    if parents:
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    ``loss`` must be a scalar (size-1) tensor attached to a tape.  Gradients
    accumulate additively, so a tensor consumed by several ops receives the
    sum of its per-path gradients.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any differentiable input")

    # Iterative post-order DFS; recursion would overflow on deep decoders.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def transpose(x: Tensor) -> Tensor:
    x = _ensure(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")

    def bw(g):
        _accumulate(x, g.T)

    return _make(x.data.T.copy(), (x,), "transpose", bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shapes {a.shape} and {b.shape}: {exc}") from exc

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), "add", bw)


def neg(x: Tensor) -> Tensor:
    x = _ensure(x)

    def bw(g):
        _accumulate(x, -g)

    return _make(-x.data, (x,), "neg", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape}: {exc}") from exc

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), "mul", bw)


def scale(x: Tensor, s: float) -> Tensor:
    x = _ensure(x)
    s = float(s)

    def bw(g):
        _accumulate(x, g * s)

    return _make(x.data * s, (x,), "scale", bw)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x = _ensure(x)
    data = x.data.sum(axis=axis, keepdims=False)

    def bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(data, (x,), "sum", bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = _ensure(x)
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), "reshape", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                _accumulate(t, piece)

    return _make(data, tensors, "concat", bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along axis 0."""
    x = _ensure(x)
    if not (0 <= start <= stop <= x.shape[0]):
        raise IndexError(f"slice_rows [{start}:{stop}] out of range for {x.shape}")
    data = x.data[start:stop].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        _accumulate(x, full)

    return _make(data, (x,), "slice_rows", bw)


def gather_rows(x: Tensor, index) -> Tensor:
    """Gather rows of ``x`` along axis 0; duplicates accumulate in backward."""
    x = _ensure(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows index must be 1-D, got shape {idx.shape}")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range [0, {n}): {idx.tolist()}")
    data = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _make(data, (x,), "gather_rows", bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Look up rows of an embedding table; grads flow only to selected rows."""
    return gather_rows(table, ids)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = _ensure(x)
    mask = (x.data > 0).astype(np.float64)

    def bw(g):
        _accumulate(x, g * mask)

    return _make(x.data * mask, (x,), "relu", bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form (the GPT-2 variant); smooth so FD checks stay tight."""
    x = _ensure(x)
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v**3)
    th = np.tanh(inner)
    data = 0.5 * v * (1.0 + th)

    def bw(g):
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        _accumulate(x, g * d)

    return _make(data, (x,), "gelu", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    x = _ensure(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        gy = g * y
        _accumulate(x, gy - y * gy.sum(axis=axis, keepdims=True))

    return _make(y, (x,), "softmax", bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    x, gain, bias = _ensure(x), _ensure(gain), _ensure(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must be ({d},), got {gain.shape} and {bias.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gain, bias), "layer_norm", bw)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-probability over non-ignored positions.

    ``targets`` is an integer array of class indices; entries equal to
    ``ignore_index`` contribute nothing to the loss or the gradient.
    """
    logits = _ensure(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, classes] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, classes = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy targets must have shape ({n},), got {t.shape}")
    valid = t != ignore_index
    bad = valid & ((t < 0) | (t >= classes))
    if bad.any():
        raise IndexError(f"cross_entropy target out of range [0, {classes}): {t[bad].tolist()}")
    count = int(valid.sum())

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    if count == 0:
        data = np.float64(0.0)
    else:
        picked = logp[valid, t[valid]]
        data = np.float64(-picked.sum() / count)

    def bw(g):
        if count == 0:
            return
        p = np.exp(logp)
        grad = p.copy()
        grad[np.arange(n), np.where(valid, t, 0)] -= 1.0
        grad[~valid] = 0.0
        _accumulate(logits, grad * (float(g) / count))

    return _make(data, (logits,), "cross_entropy", bw)
