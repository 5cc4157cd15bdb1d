"""Parameters, parameter containers, and the two stock blocks (MLP, MHSA)."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, add, concat, matmul, relu, scale, softmax, transpose
from .errors import ConfigError, DimensionError


class Parameter:
    """A named trainable tensor with seeded uniform initialization.

    Values are drawn uniformly from [-a, a] with a = sqrt(1/fan_in), so two
    parameters built from generators with the same seed and the same
    (shape, fan_in) are bit-identical.
    """

    def __init__(self, name: str, shape, rng: np.random.Generator, fan_in: int | None = None):
        shape = tuple(int(s) for s in shape)
        if fan_in is None:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
        a = math.sqrt(1.0 / fan_in)
        self.name = name
        self.fan_in = fan_in
        self.tensor = Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.shape})"


class Module:
    """Minimal parameter container; children are discovered by attribute walk."""

    def named_parameters(self):
        out = []

        def walk(obj, prefix):
            for key, val in vars(obj).items():
                if isinstance(val, Parameter):
                    out.append((prefix + key, val))
                elif isinstance(val, Module):
                    walk(val, f"{prefix}{key}.")
                elif isinstance(val, (list, tuple)):
                    for i, item in enumerate(val):
                        if isinstance(item, Parameter):
                            out.append((f"{prefix}{key}.{i}", item))
                        elif isinstance(item, Module):
                            walk(item, f"{prefix}{key}.{i}.")

        walk(self, "")
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def mlp_forward(x: Tensor, layers) -> Tensor:
    """Chain of affine layers with ReLU between them (none after the last).

    ``layers`` alternates weight/bias tensors: [W1, b1, W2, b2, ...]. Weights
    are (d_in, d_out), biases (d_out,).
    """
    tensors = [getattr(p, "tensor", p) for p in layers]
    if len(tensors) < 2 or len(tensors) % 2 != 0:
        raise DimensionError("mlp_forward: layers must be (weight, bias) pairs")
    h = x
    n_affine = len(tensors) // 2
    for i in range(n_affine):
        w, b = tensors[2 * i], tensors[2 * i + 1]
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(
                f"mlp_forward: layer {i} expects width {w.shape[0]}, got {h.shape[-1]}"
            )
        h = add(matmul(h, w), b)
        if i < n_affine - 1:
            h = relu(h)
    return h


class MLP(Module):
    """Fully connected stack; two affine layers by default."""

    def __init__(self, name: str, dims, rng: np.random.Generator):
        self.dims = list(dims)
        self.layers = []
        for i in range(len(self.dims) - 1):
            d_in, d_out = self.dims[i], self.dims[i + 1]
            self.layers.append(Parameter(f"{name}.w{i}", (d_in, d_out), rng, fan_in=d_in))
            self.layers.append(Parameter(f"{name}.b{i}", (d_out,), rng, fan_in=d_in))

    def forward(self, x: Tensor) -> Tensor:
        return mlp_forward(x, self.layers)


def mhsa_forward(q: Tensor, heads: int, params) -> Tensor:
    """Multi-head self-attention over the rows of ``q``.

    ``params`` is [wq, bq, wk, bk, wv, bv, wo, bo], all (d, d) / (d,). Scores
    are scaled by 1/sqrt(d/heads); a single row attends only to itself, so the
    output reduces to its value projection followed by the output projection.
    """
    tensors = [getattr(p, "tensor", p) for p in params]
    wq, bq, wk, bk, wv, bv, wo, bo = tensors
    d = q.shape[1]
    if d % heads != 0:
        raise ConfigError(f"mhsa_forward: width {d} not divisible by {heads} heads")
    dh = d // heads
    qp = add(matmul(q, wq), bq)
    kp = add(matmul(q, wk), bk)
    vp = add(matmul(q, wv), bv)
    outs = []
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        qh, kh, vh = qp[:, sl], kp[:, sl], vp[:, sl]
        scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dh))
        attn = softmax(scores, axis=1)
        outs.append(matmul(attn, vh))
    merged = concat(outs, axis=1)
    return add(matmul(merged, wo), bo)


class MultiHeadSelfAttention(Module):
    def __init__(self, name: str, d: int, heads: int, rng: np.random.Generator):
        if d % heads != 0:
            raise ConfigError(f"attention width {d} not divisible by {heads} heads")
        self.heads = heads
        self.proj = []
        for stem in ("q", "k", "v", "o"):
            self.proj.append(Parameter(f"{name}.w{stem}", (d, d), rng, fan_in=d))
            self.proj.append(Parameter(f"{name}.b{stem}", (d,), rng, fan_in=d))

    def forward(self, q: Tensor) -> Tensor:
        return mhsa_forward(q, self.heads, self.proj)
