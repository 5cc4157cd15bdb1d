"""Instance-adaptive prototype learning.

Per-class prototypes are built per input: the confidence channel of each
foreground class re-weights the mid-level feature map, the weighted features
are pooled into an instance proposal, and each proposal is fused with a
learnable common proposal through a shared MLP. Segmentation is a per-voxel
dot product between the full-resolution embedding and each fused prototype,
squashed through a sigmoid.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    cosine_sim,
    div,
    matmul,
    mul,
    nearest_resize,
    reshape,
    sigmoid,
    softmax,
    tmean,
    transpose,
    trilinear_resize,
    tsum,
)
from .errors import ConfigError, DimensionError
from .nn import MLP


def resize_mask(mask: Tensor, target, mode: str = "trilinear") -> Tensor:
    """Resample a confidence mask; nearest-neighbor is the ablation alternative."""
    if mode == "trilinear":
        return trilinear_resize(mask, target)
    if mode == "nearest":
        return nearest_resize(mask, target)
    raise ConfigError(f"unknown mask resize mode: {mode}")


def instance_proposals(f_mid: Tensor, m_final: Tensor, pooling: str = "mass",
                       resize: str = "trilinear") -> Tensor:
    """Mask-weighted pooling of the mid features, one row per foreground class.

    Each foreground confidence channel is resampled to the feature grid and
    used as pooling weights: row k is sum(M_k * F) / sum(M_k), which makes the
    proposal invariant to rescaling the mask and independent of object size.
    ``pooling="count"`` divides by the voxel count instead. A channel with
    vanishing mass falls back to the plain feature mean.
    """
    if f_mid.ndim != 4 or m_final.ndim != 4:
        raise DimensionError("instance_proposals: expected rank-4 features and masks")
    if pooling not in ("mass", "count"):
        raise ConfigError(f"unknown pooling mode: {pooling}")
    k_plus_1 = m_final.shape[3]
    if k_plus_1 < 2:
        raise DimensionError(f"instance_proposals: need K+1 >= 2 mask channels, got {k_plus_1}")
    spatial = f_mid.shape[:3]
    d_i = f_mid.shape[3]
    voxels = float(np.prod(spatial))
    rows = []
    for k in range(1, k_plus_1):
        mk = resize_mask(m_final[:, :, :, k : k + 1], spatial, resize)
        weighted = tsum(mul(mk, f_mid), axis=(0, 1, 2))
        if pooling == "count":
            pooled = div(weighted, voxels)
        else:
            mass = tsum(mk)
            if mass.item() < 1e-8:
                pooled = tmean(f_mid, axis=(0, 1, 2))
            else:
                pooled = div(weighted, mass)
        rows.append(reshape(pooled, (1, d_i)))
    return concat(rows, axis=0)


def fuse_prototypes(instance: Tensor, common: Tensor, fuse_mlp: MLP) -> Tensor:
    """Concatenate instance and common proposals per class and fuse with a shared MLP."""
    if instance.shape != common.shape:
        raise DimensionError(
            f"fuse_prototypes: proposal shapes differ, {instance.shape} vs {common.shape}"
        )
    return fuse_mlp.forward(concat([instance, common], axis=1))


def predict_masks(f_out: Tensor, fused: Tensor) -> Tensor:
    """Per-class confidence volume: sigmoid of voxel-embedding / prototype dot products."""
    if f_out.ndim != 4 or f_out.shape[3] != fused.shape[1]:
        raise DimensionError(
            f"predict_masks: widths differ, {f_out.shape} vs prototypes {fused.shape}"
        )
    h, w, z, d = f_out.shape
    flat = reshape(f_out, (h * w * z, d))
    logits = matmul(flat, transpose(fused))
    return reshape(sigmoid(logits), (h, w, z, fused.shape[0]))


def pixel_to_prototype_prob(f: Tensor, prototypes: Tensor, sign: float = -1.0) -> Tensor:
    """Class distribution for one pixel embedding from prototype cosine similarities.

    The default ``sign=-1`` exponentiates the negated similarity, so a more
    similar prototype gets a *lower* probability; ``sign=+1`` gives the
    conventional similarity-proportional variant. Output sums to one.
    """
    if f.ndim != 1 or prototypes.ndim != 2 or prototypes.shape[1] != f.shape[0]:
        raise DimensionError(
            f"pixel_to_prototype_prob: widths differ, {f.shape} vs {prototypes.shape}"
        )
    sims = [mul(cosine_sim(f, prototypes[k, :]), float(sign)) for k in range(prototypes.shape[0])]
    stacked = concat([reshape(s, (1,)) for s in sims], axis=0)
    return softmax(stacked, axis=0)


def label_map(y_hat, threshold: float = 0.5) -> np.ndarray:
    """Discrete labels from per-class confidences.

    Per voxel: the argmax class (1-based) when its confidence clears the
    threshold, else 0 for background. Ties resolve to the lowest class index.
    """
    arr = np.asarray(getattr(y_hat, "data", y_hat))
    best = arr.argmax(axis=-1)
    conf = arr.max(axis=-1)
    return np.where(conf > threshold, best + 1, 0).astype(np.int64)
