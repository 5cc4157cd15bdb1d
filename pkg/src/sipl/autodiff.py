"""Reverse-mode tensor core.

Dense float64 tensors recording a backward graph as they are built. Each
tensor remembers its parents and a closure that scatters an incoming gradient
back to them; ``backward()`` replays those closures in reverse creation
order, so every node is visited once and gradients accumulate additively.
Tensors are immutable after construction except for gradient accumulation;
distinct graphs share no mutable state and may live on distinct threads.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import kernels
from .errors import DegenerateInputError, DimensionError, UsageError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._id = next(_ids)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise UsageError(f"item() needs a scalar tensor, got shape {self.data.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Seed a unit gradient at this scalar and propagate to all ancestors."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {self.data.shape}")
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(node._parents)
        self._accumulate(np.ones_like(self.data))
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), bw)


def matmul(a, b) -> Tensor:
    """2-D matrix product with the usual transpose-product backward."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _make(out_data, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), bw)


def getitem(a, idx) -> Tensor:
    """Basic (slice/int/tuple) indexing; fancy indexing is not supported."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    return _make(out_data, (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out_data, tensors, bw)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def bw(g):
        a._accumulate(g * (a.data > 0.0))

    return _make(out_data, (a,), bw)


def sigmoid(a) -> Tensor:
    """Elementwise logistic function, evaluated without overflow on either tail."""
    a = as_tensor(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def softmax(a, axis) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to one on any finite input."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _make(out_data, (a,), bw)


def clip(a, lo, hi) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only through unclamped entries."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        a._accumulate(g * inside)

    return _make(out_data, (a,), bw)


def upsample2(a) -> Tensor:
    """Nearest-neighbor doubling of the three spatial axes of an (H,W,Z,C) tensor."""
    a = as_tensor(a)
    out_data = a.data.repeat(2, axis=0).repeat(2, axis=1).repeat(2, axis=2)

    def bw(g):
        h, w, z, c = a.data.shape
        a._accumulate(g.reshape(h, 2, w, 2, z, 2, c).sum(axis=(1, 3, 5)))

    return _make(out_data, (a,), bw)


def conv3d(x, w, b, stride=1, pad=1) -> Tensor:
    """3-D convolution over an (H,W,Z,Cin) tensor with (k,k,k,Cin,Cout) weights."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 5 or x.shape[3] != w.shape[3]:
        raise DimensionError(f"conv3d: incompatible shapes {x.shape} and {w.shape}")
    out_data = kernels.conv3d_forward(x.data, w.data, b.data, stride, pad)

    def bw(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accumulate(kernels.conv3d_backward_input(g, w.data, stride, pad, x.data.shape))
        if w.requires_grad or b.requires_grad:
            gw, gb = kernels.conv3d_backward_weight(x.data, g, stride, pad, w.data.shape[0])
            if w.requires_grad:
                w._accumulate(gw)
            if b.requires_grad:
                b._accumulate(gb)

    return _make(out_data, (x, w, b), bw)


def trilinear_resize(x, target) -> Tensor:
    """Corner-aligned trilinear resampling of an (H,W,Z,C) tensor to (target, C).

    Interpolation weights are convex, so each channel of the output stays
    within the value range of that channel of the input.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"trilinear_resize: expected a rank-4 tensor, got {x.shape}")
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise DimensionError(f"trilinear_resize: bad target extents {target}")
    if target == x.shape[:3]:
        out_data = x.data.copy()
    else:
        out_data = kernels.trilinear_forward(x.data, target)

    def bw(g):
        if target == x.data.shape[:3]:
            x._accumulate(g)
        else:
            x._accumulate(kernels.trilinear_backward(np.ascontiguousarray(g), x.data.shape[:3]))

    return _make(out_data, (x,), bw)


def nearest_resize(x, target) -> Tensor:
    """Corner-aligned nearest-neighbor resampling of an (H,W,Z,C) tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"nearest_resize: expected a rank-4 tensor, got {x.shape}")
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise DimensionError(f"nearest_resize: bad target extents {target}")
    idx = []
    for n_in, n_out in zip(x.shape[:3], target):
        if n_out == 1:
            pos = np.array([(n_in - 1) / 2.0])
        elif n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        idx.append(np.clip(np.rint(pos).astype(np.int64), 0, n_in - 1))
    gather = np.ix_(*idx)
    out_data = x.data[gather]

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, gather, g)

    return _make(out_data, (x,), bw)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two equal-length vectors, as a scalar graph node."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_sim: need equal-length vectors, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_sim: zero-norm input")
    ar = reshape(a, (1, a.shape[0]))
    br = reshape(b, (b.shape[0], 1))
    dot = reshape(matmul(ar, br), ())
    denom = mul(sqrt(tsum(mul(a, a))), sqrt(tsum(mul(b, b))))
    return div(dot, denom)


def scale(a, s: float) -> Tensor:
    return mul(a, float(s))


def grad_check(f, tensors, h=1e-5, rel_tol=1e-4, max_coords=None, rng=None, grad_hook=None):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` re-runs the forward computation from the tensors' current data and
    returns a scalar. Every tensor with ``requires_grad`` is checked on all
    coordinates, or on ``max_coords`` sampled ones; frozen tensors are listed
    as excluded. ``grad_hook(name, analytic)`` is test instrumentation that
    may tamper with the analytic gradient before comparison.
    """
    named = []
    items = tensors if isinstance(tensors, (list, tuple)) else [tensors]
    for i, t in enumerate(items):
        if isinstance(t, tuple):
            name, tensor = t
        else:
            name = getattr(t, "name", None) or f"x{i}"
            tensor = getattr(t, "tensor", t)
        named.append((name, tensor))

    for _, t in named:
        t.zero_grad()
    out = f()
    if not isinstance(out, Tensor) or out.size != 1:
        raise UsageError("grad_check: computation must produce a scalar tensor")
    out.backward()

    if rng is None:
        rng = np.random.default_rng(0)
    entries = []
    for name, t in named:
        if not t.requires_grad:
            entries.append(GradCheckEntry(name, excluded=True))
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if grad_hook is not None:
            analytic = grad_hook(name, analytic)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and max_coords < n:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        max_rel = 0.0
        worst = -1
        aflat = analytic.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            rel = abs(aflat[c] - numeric) / max(abs(aflat[c]), abs(numeric), 1e-6)
            if rel > max_rel:
                max_rel = rel
                worst = int(c)
        entries.append(GradCheckEntry(name, checked=len(coords), max_rel_err=max_rel, worst_coord=worst))
    return GradCheckReport(entries, rel_tol)


class GradCheckEntry:
    def __init__(self, name, checked=0, max_rel_err=0.0, worst_coord=-1, excluded=False):
        self.name = name
        self.checked = checked
        self.max_rel_err = max_rel_err
        self.worst_coord = worst_coord
        self.excluded = excluded

    def line(self, rel_tol: float) -> str:
        if self.excluded:
            return f"{self.name}: excluded (frozen)"
        status = "ok" if self.max_rel_err < rel_tol else "FAIL"
        return f"{self.name}: {status} max_rel={self.max_rel_err:.3e} over {self.checked} coords"


class GradCheckReport:
    def __init__(self, entries, rel_tol):
        self.entries = entries
        self.rel_tol = rel_tol

    @property
    def max_rel_err(self) -> float:
        errs = [e.max_rel_err for e in self.entries if not e.excluded]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.rel_tol

    def lines(self):
        return [e.line(self.rel_tol) for e in self.entries] + [
            f"overall: {'PASS' if self.passed else 'FAIL'} max_rel={self.max_rel_err:.3e} tol={self.rel_tol:g}"
        ]


