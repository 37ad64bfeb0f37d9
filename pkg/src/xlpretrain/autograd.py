"""Dense tensors with reverse-mode automatic differentiation on numpy arrays.

Storage is float32 by default; a float64 mode (pass dtype explicitly or use
`default_dtype`) exists for gradient checking. Everything is deterministic:
no op consumes global RNG, and numpy reductions are fixed-order per build.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

# When True, every forward op asserts its output is finite (debug builds).
DEBUG_CHECKS = False

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def default_dtype(dtype):
    """Temporarily change the storage dtype for new tensors (float64 mode)."""
    global DEFAULT_DTYPE
    prev = DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DEFAULT_DTYPE = prev


def _check(arr):
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by a forward op")
    return arr


class Tensor:
    """A node in the computation graph holding a numpy array.

    Leaf tensors with requires_grad=True collect gradients in `.grad` after
    `backward()` on a downstream scalar. Tensors are immutable by convention
    once created (the optimizer mutates parameter `.data` in place between
    steps, never mid-graph).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._done = False

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
        return float(self.data)

    def detach(self):
        """A view of the same data cut off from the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        return add(self, mul_scalar(other, -1.0)) if isinstance(other, Tensor) else NotImplemented

    def backward(self):
        """Reverse-mode sweep from this scalar; fills `.grad` on reachable leaves.

        May be called once per recorded graph; a second call without
        re-running the forward raises.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if self._done:
            raise RuntimeError("backward() already called on this graph; re-run the forward first")

        topo, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, expanded = stack.pop()
                if expanded:
                    topo.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                node._backward_fn = None  # free closures; forbids reuse
            node._done = True
            if node._parents:
                node.grad = None  # keep memory bounded; leaves retain grads
        self.grad = None if self._parents else self.grad
        self._done = True


def _make(data, parents, backward_fn):
    """Build an op output node; records the graph only if grads are on."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = _check(data)
    out.grad = None
    out.requires_grad = req
    out._parents = tuple(p for p in parents if p.requires_grad) if req else ()
    out._backward_fn = backward_fn if req else None
    out._done = False
    return out


def _accum(t, g):
    # copy on first store: g may be aliased by another consumer's closure
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=g.dtype)
    else:
        t.grad += g


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def mul_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)
    data = x.data * np.asarray(s, dtype=x.data.dtype)

    def backward(g):
        _accum(x, g * s)

    return _make(data, (x,), backward)


def add_scalar(x: Tensor, s: float) -> Tensor:
    data = x.data + np.asarray(s, dtype=x.data.dtype)

    def backward(g):
        _accum(x, g)

    return _make(data, (x,), backward)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """x + constant array (no gradient into c); used for attention masks."""
    data = x.data + c

    def backward(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _make(data, (x,), backward)


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """x * constant array (no gradient into c)."""
    data = x.data * c

    def backward(g):
        _accum(x, _unbroadcast(g * c, x.shape))

    return _make(data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)
    orig = x.shape

    def backward(g):
        _accum(x, g.reshape(orig))

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.ascontiguousarray(np.transpose(g, inv)))

    return _make(data, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2-D or batched with identical leading dims."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul operands need matching batch dims: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _make(data, (a, b), backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """table[ids] for an integer id array; backward scatter-adds rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _make(data, (table,), backward)


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accum(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))

    return _make(data, (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    data = np.asarray(x.data.sum() / n, dtype=x.data.dtype)

    def backward(g):
        _accum(x, np.broadcast_to(g / n, x.shape).astype(x.data.dtype))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows sum to 1 for any finite input."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accum(x, p * (g - dot))

    return _make(p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    dt = x.data.dtype.type
    c, k = dt(np.sqrt(2.0 / np.pi)), dt(0.044715)
    u = c * (x.data + k * x.data**3)
    t = np.tanh(u)
    data = dt(0.5) * x.data * (dt(1.0) + t)

    def backward(g):
        du = c * (dt(1.0) + dt(3.0) * k * x.data**2)
        d = dt(0.5) * (dt(1.0) + t) + dt(0.5) * x.data * (dt(1.0) - t * t) * du
        _accum(x, g * d)

    return _make(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance over the last axis, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        n = x.shape[-1]
        gg = g * gain.data
        _accum(
            x,
            (inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))).astype(
                x.data.dtype
            ),
        )
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red))
        _accum(bias, g.sum(axis=red))

    return _make(data.astype(x.data.dtype), (x, gain, bias), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    data = x.data * keep * scale

    def backward(g):
        _accum(x, g * keep * scale)

    return _make(data.astype(x.data.dtype), (x,), backward)


IGNORE_INDEX = -100


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-softmax over positions whose target != ignore_index.

    All-ignored input is defined as loss 0 and emits a warning; the returned
    tensor carries the count of contributing positions as `n_valid` metadata
    through `cross_entropy.last_n_valid`.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError("cross_entropy expects logits (N,V) and targets (N,)")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    cross_entropy.last_n_valid = n_valid
    V = logits.shape[1]
    real = targets[valid]
    if real.size and (real.min() < 0 or real.max() >= V):
        raise ValueError("target id outside [0, V)")
    if n_valid == 0:
        warnings.warn("cross_entropy: every position ignored; loss defined as 0", RuntimeWarning)
        return mul_scalar(tsum(logits), 0.0)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(len(targets))[valid], real]
    data = np.asarray(nll.sum() / n_valid, dtype=logits.data.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(len(targets))[valid], real] -= 1.0
        grad[~valid] = 0.0
        _accum(logits, (grad * (g / n_valid)).astype(logits.data.dtype))

    return _make(data, (logits,), backward)


cross_entropy.last_n_valid = 0
