"""Segmentation and auxiliary mask losses, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field

from .autodiff import Tensor, add, as_tensor, clip, div, log, mul, neg, scale, sub, tmean, tsum
from .errors import DimensionError


@dataclass
class LossConfig:
    alpha: float = 0.05  # weight of the per-layer mask losses in the total
    epsilon: float = 1e-6  # dice smoothing, keeps empty classes finite
    clamp: float = 1e-7  # probability floor (and 1-clamp ceiling) inside the log
    class_reduce: str = "mean"  # "mean" or "sum" over class channels

    def __post_init__(self):
        if self.alpha < 0 or self.epsilon <= 0:
            raise ValueError("alpha must be >= 0 and epsilon > 0")


@dataclass
class LossReport:
    seg: float
    aux_per_layer: list = field(default_factory=list)
    total: float = 0.0


def soft_dice(y, y_hat, epsilon: float = 1e-6) -> Tensor:
    """1 - (2*sum(y*yhat)+eps) / (sum(y^2)+sum(yhat^2)+eps), over all elements."""
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionError(f"soft_dice: shapes differ, {y.shape} vs {y_hat.shape}")
    inter = add(scale(tsum(mul(y, y_hat)), 2.0), epsilon)
    denom = add(add(tsum(mul(y, y)), tsum(mul(y_hat, y_hat))), epsilon)
    return sub(1.0, div(inter, denom))


def bce(y, y_hat, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with the prediction clamped away from {0, 1}."""
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionError(f"bce: shapes differ, {y.shape} vs {y_hat.shape}")
    p = clip(y_hat, clamp, 1.0 - clamp)
    term = add(mul(y, log(p)), mul(sub(1.0, y), log(sub(1.0, p))))
    return neg(tmean(term))


def _per_channel(y: Tensor, y_hat: Tensor, cfg: LossConfig) -> Tensor:
    channels = y.shape[-1]
    total = None
    for k in range(channels):
        yk = y[..., k]
        pk = y_hat[..., k]
        term = add(soft_dice(yk, pk, cfg.epsilon), bce(yk, pk, cfg.clamp))
        total = term if total is None else add(total, term)
    if cfg.class_reduce == "mean":
        total = scale(total, 1.0 / channels)
    return total


def seg_loss(y, y_hat, cfg: LossConfig = LossConfig()) -> Tensor:
    """Dice + BCE per foreground channel, reduced over the K channels."""
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionError(f"seg_loss: shapes differ, {y.shape} vs {y_hat.shape}")
    return _per_channel(y, y_hat, cfg)


def aux_loss(y_onehot, m_l, cfg: LossConfig = LossConfig()) -> Tensor:
    """Same dice + BCE composition over all K+1 channels of one pseudo-mask layer.

    ``y_onehot`` is the ground truth downsampled (nearest label) to the
    layer's resolution and one-hot encoded including background.
    """
    y_onehot, m_l = as_tensor(y_onehot), as_tensor(m_l)
    if y_onehot.shape != m_l.shape:
        raise DimensionError(f"aux_loss: shapes differ, {y_onehot.shape} vs {m_l.shape}")
    return _per_channel(y_onehot, m_l, cfg)


def total_loss(seg, aux, alpha: float):
    """seg + alpha * sum(aux); works on graph tensors and on plain floats."""
    if isinstance(seg, Tensor):
        out = seg
        acc = None
        for a in aux:
            acc = a if acc is None else add(acc, a)
        if acc is not None:
            out = add(out, scale(acc, alpha))
        return out
    acc = 0.0
    for a in aux:
        acc = acc + a
    return seg + alpha * acc


def make_report(seg_value: float, aux_values, alpha: float) -> LossReport:
    aux_values = [float(a) for a in aux_values]
    return LossReport(
        seg=float(seg_value),
        aux_per_layer=aux_values,
        total=total_loss(float(seg_value), aux_values, alpha),
    )
