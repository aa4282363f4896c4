"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run tape over numpy: every primitive records a node with
a backward closure, `backward()` walks the graph in reverse topological
order and accumulates gradients into leaf tensors.  The primitive set is
exactly what the encoder stack and the alignment losses need; there is no
kernel fusion, no views, no GPU.

Set CHECK_FINITE (or LMBRIDGE_CHECK_FINITE=1) to assert after every
operation that outputs are free of NaN/Inf.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DTYPE = np.float64

CHECK_FINITE = os.environ.get("LMBRIDGE_CHECK_FINITE", "") == "1"

_GRAD_ENABLED = True


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""

    def __init__(self, op, a_shape, b_shape):
        self.op = op
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)
        super().__init__(f"{op}: incompatible shapes {self.a_shape} and {self.b_shape}")


class GatherIndexError(IndexError):
    """Raised on an out-of-range gather; carries the index and the extent."""

    def __init__(self, index, extent):
        self.index = int(index)
        self.extent = int(extent)
        super().__init__(f"gather index {self.index} out of range for extent {self.extent}")


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus an optional gradient and a tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Populate .grad of every reachable leaf with d(self)/d(leaf).

        Requires a scalar; repeated calls accumulate into leaf gradients.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        local = {id(self): np.ones_like(self.data)}
        for node in order:
            g = local.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is not None:
                for parent, pg in zip(node._parents, node._backward_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    buf = local.get(id(parent))
                    local[id(parent)] = pg if buf is None else buf + pg
            else:
                # Leaf: accumulate into the persistent gradient.
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g

    # Operator sugar; scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _toposort(root):
    """Reverse topological order (root first) via iterative post-order DFS."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _node(data, parents, backward_fn):
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    out.requires_grad = req
    if req:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values produced by an operation on finite inputs")
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def _mm(x, y):
    """np.matmul, but n-D x 2-D collapses to one flat GEMM (numpy would
    otherwise loop small per-slice products)."""
    if x.ndim > 2 and y.ndim == 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(*lead, y.shape[-1])
    return np.matmul(x, y)


def matmul(a, b):
    """Matrix product with broadcasting over leading axes."""
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            if b.data.ndim == 2:
                a2 = a.data.reshape(-1, a.data.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                gb = a2.T @ g2
            else:
                a2 = a.data[None, :] if a.data.ndim == 1 else a.data
                g2 = g[None, :] if a.data.ndim == 1 else g
                gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b.data.shape)
        return ga, gb

    return _node(_mm(a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# structure

def gather_rows(table, ids):
    """Row gather: out[..., :] = table[ids[...], :].  Embedding lookup."""
    if table.data.ndim != 2:
        raise ShapeMismatch("gather_rows", table.shape, np.shape(ids))
    idx = np.asarray(ids)
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx.min() if idx.min() < 0 else idx.max()
        raise GatherIndexError(bad, n)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _node(table.data[idx], (table,), backward)


def reorder(h, order):
    """Per-sequence row gather along axis 1: out[b, j] = h[b, order[b, j]].

    The backward pass scatter-adds, so positions gathered more than once
    receive the sum of their output gradients.
    """
    idx = np.asarray(order)
    if h.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != h.data.shape[0]:
        raise ShapeMismatch("reorder", h.shape, idx.shape)
    t = h.data.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= t):
        bad = idx.min() if idx.min() < 0 else idx.max()
        raise GatherIndexError(bad, t)
    rows = np.arange(idx.shape[0])[:, None]

    def backward(g):
        gh = np.zeros_like(h.data)
        np.add.at(gh, (rows, idx), g)
        return (gh,)

    return _node(h.data[rows, idx], (h,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def transpose(x, axes=None):
    perm = tuple(axes) if axes is not None else tuple(reversed(range(x.data.ndim)))
    inv = np.argsort(perm)
    return _node(np.transpose(x.data, perm), (x,),
                 lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    old = x.data.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# normalization and activations

def layer_norm(x, gain, bias, eps=1e-5):
    """Layer normalization over the last axis with learned gain and bias."""
    if gain.data.shape != x.data.shape[-1:] or bias.data.shape != x.data.shape[-1:]:
        raise ShapeMismatch("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, x.data.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, x.data.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _node(xhat * gain.data + bias.data, (x, gain, bias), backward)


def softmax(x):
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return _node(s, (x,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)

    return _node(x.data * phi, (x,), backward)


def relu(x):
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.01):
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return _node(x.data * scale, (x,), lambda g: (g * scale,))


def dropout(x, p, rng, training):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# losses and reductions

def cross_entropy(logits, targets, ignore_index=-100):
    """Per-position cross entropy with integer targets.

    Returns losses shaped like `targets`; positions equal to ignore_index
    contribute exactly zero loss and zero gradient.
    """
    tgt = np.asarray(targets)
    if logits.data.shape[:-1] != tgt.shape:
        raise ShapeMismatch("cross_entropy", logits.shape, tgt.shape)
    v = logits.data.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = tgt.reshape(-1)
    keep = tflat != ignore_index
    safe = np.where(keep, tflat, 0)
    if safe.size and (safe.min() < 0 or safe.max() >= v):
        bad = safe.min() if safe.min() < 0 else safe.max()
        raise GatherIndexError(bad, v)
    zmax = flat.max(axis=-1, keepdims=True)
    z = flat - zmax
    lse = np.log(np.exp(z).sum(axis=-1)) + zmax[:, 0]
    picked = flat[np.arange(flat.shape[0]), safe]
    loss = np.where(keep, lse - picked, 0.0).reshape(tgt.shape)

    def backward(g):
        sm = np.exp(flat - zmax)
        sm /= sm.sum(axis=-1, keepdims=True)
        sm[np.arange(flat.shape[0]), safe] -= 1.0
        sm *= (g.reshape(-1) * keep)[:, None]
        return (sm.reshape(logits.data.shape),)

    return _node(loss, (logits,), backward)


def masked_sum(x, mask):
    """Sum of x over positions where mask is nonzero (as a scalar)."""
    m = np.asarray(mask, dtype=DTYPE)
    if m.shape != x.data.shape:
        raise ShapeMismatch("masked_sum", x.shape, m.shape)
    return _node(np.asarray((x.data * m).sum()), (x,), lambda g: (g * m,))


def masked_mean(x, mask):
    """Mean of x over positions where mask is nonzero; exactly 0 if none."""
    m = np.asarray(mask, dtype=DTYPE)
    if m.shape != x.data.shape:
        raise ShapeMismatch("masked_mean", x.shape, m.shape)
    count = m.sum()
    if count == 0:
        return _node(np.asarray(0.0), (x,), lambda g: (np.zeros_like(x.data),))
    return _node(np.asarray((x.data * m).sum() / count), (x,),
                 lambda g: (g * m / count,))


def tsum(x):
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (g * np.ones_like(x.data),))


def tmean(x):
    n = x.data.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (g * np.ones_like(x.data) / n,))


# ---------------------------------------------------------------------------
# initializers

def truncated_normal(shape, std, rng):
    """Gaussian init truncated at two standard deviations (resampled)."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


def orthogonal_init(rows, cols, seed):
    """Matrix with orthonormal rows (rows <= cols) or columns (rows > cols).

    QR of a seeded Gaussian with the sign fix applied, so the same seed
    always yields identical bytes.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"orthogonal_init needs positive dims, got ({rows}, {cols})")
    rng = np.random.default_rng(seed)
    big, small = max(rows, cols), min(rows, cols)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    mat = q.T if rows <= cols else q
    return Tensor(np.ascontiguousarray(mat))
