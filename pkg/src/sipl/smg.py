"""Self-supervised mask generation.

Learnable object queries are refined over six decoder layers, two per scale
from coarse to fine. Each layer hard-assigns every pixel of that scale's
feature map to its best active cluster, adds the summed features of its pixels
to the winning query row on top of a self-attention update, then emits a
pseudo mask by projecting queries to class logits and aggregating them with
the pixel-to-cluster similarities.

Which clusters count as active is decided by a self-supervised filter: a
cluster survives when the region it claims overlaps, beyond a scheduled
threshold, the region of its best-matching class in the previous layer's
pseudo mask. Hard assignments and filter decisions carry no gradient;
training signal reaches the queries through self-attention, the similarity
maps, and the per-layer mask losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, clip, div, matmul, reshape, scale, softmax, sqrt, tsum, mul, transpose
from .backbone import FeaturePyramid
from .errors import ConfigError, DimensionError, ScheduleError, UsageError
from .kernels import trilinear_forward
from .nn import MLP, Module, MultiHeadSelfAttention, Parameter


@dataclass
class MaskDecoderConfig:
    num_queries: int = 32
    num_heads: int = 4
    num_layers: int = 6
    similarity: str = "cosine"  # "cosine" (bounded) or "dot" (scaled dot product)
    filtering: bool = True
    schedule: bool = True  # scheduled tau; otherwise fixed_tau is used
    fixed_tau: float = 0.5
    background_overlap: bool = True  # include the background class in the overlap max
    scale_set: list = field(default_factory=lambda: [32, 16, 8])

    def __post_init__(self):
        if self.num_queries <= 0:
            raise ConfigError("num_queries must be positive")
        if self.similarity not in ("dot", "cosine"):
            raise ConfigError(f"unknown similarity mode: {self.similarity}")
        if not self.scale_set:
            raise ConfigError("scale_set must not be empty")
        if not 0.0 <= self.fixed_tau <= 1.0:
            raise ConfigError(f"fixed_tau {self.fixed_tau} outside [0, 1]")

    def layer_strides(self) -> list[int]:
        """Decoder layers distributed evenly over the scale set, coarse first."""
        scales = sorted(self.scale_set, reverse=True)
        per, extra = divmod(self.num_layers, len(scales))
        out = []
        for i, s in enumerate(scales):
            out.extend([s] * (per + (1 if i < extra else 0)))
        return out


@dataclass
class LayerMasks:
    stride: int
    spatial: tuple  # (H_l, W_l, Z_l)
    active: np.ndarray  # bool (N,)
    assignments: np.ndarray  # (N, P_l) one-hot per column
    pixel_cluster: Tensor  # (P_l, N) raw similarity scores
    cluster_class: Tensor  # (N, K+1) class logits
    masks: Tensor  # (P_l, K+1), rows softmax-normalized


@dataclass
class DecoderOutput:
    queries: Tensor
    layers: list


def tau_schedule(epoch: int) -> float:
    """Overlap threshold ramp: 0.1 at epoch 0, linear to 0.5 at epoch 50, flat after."""
    if epoch < 0:
        raise UsageError(f"epoch must be nonnegative, got {epoch}")
    return min(epoch / 50.0, 1.0) * 0.4 + 0.1


def pixel_to_cluster(f_d: Tensor, q: Tensor, mode: str = "dot") -> Tensor:
    """Similarity between every pixel feature and every query, (P, N) raw scores."""
    if f_d.shape[1] != q.shape[1]:
        raise DimensionError(f"pixel_to_cluster: widths differ, {f_d.shape} vs {q.shape}")
    if mode == "dot":
        return scale(matmul(f_d, transpose(q)), 1.0 / math.sqrt(q.shape[1]))
    fn = sqrt(clip(tsum(mul(f_d, f_d), axis=1, keepdims=True), 1e-24, np.inf))
    qn = sqrt(clip(tsum(mul(q, q), axis=1, keepdims=True), 1e-24, np.inf))
    return matmul(div(f_d, fn), transpose(div(q, qn)))


def cluster_to_class(q: Tensor, head: MLP) -> Tensor:
    """Project query embeddings to K+1 class logits (background included).

    Query rows are L2-normalized before the MLP: the additive feature sums in
    the update step grow row norms across layers, and feeding raw magnitudes
    saturates the downstream mask softmax until its gradient dies.
    """
    qn = sqrt(clip(tsum(mul(q, q), axis=1, keepdims=True), 1e-24, np.inf))
    return head.forward(div(q, qn))


def aggregate_masks(m_pc: Tensor, m_cc: Tensor) -> Tensor:
    """Pseudo mask (P, K+1): product of the two maps, rows softmax-normalized."""
    return softmax(matmul(m_pc, m_cc), axis=1)


def hard_assignments(scores: np.ndarray, active: np.ndarray) -> np.ndarray:
    """One-hot (N, P) map of each pixel to its best active cluster.

    Ties break toward the lowest cluster index; inactive rows stay zero.
    """
    if not active.any():
        raise ScheduleError("no active clusters to assign pixels to")
    masked = np.where(active[None, :], scores, -np.inf)
    winners = masked.argmax(axis=1)
    a = np.zeros((scores.shape[1], scores.shape[0]))
    a[winners, np.arange(scores.shape[0])] = 1.0
    return a


def update_queries(q_prev: Tensor, f_d: Tensor, active: np.ndarray, attn: MultiHeadSelfAttention) -> Tensor:
    """One decoder step: self-attention plus hard-assigned feature sums.

    The assignment matrix is built from the pre-update queries and treated as
    a constant, so gradients flow only through the attention path and the
    pixel features. A cluster with no pixels (or filtered out) receives the
    attention term alone.
    """
    if f_d.shape[1] != q_prev.shape[1]:
        raise DimensionError(f"update_queries: widths differ, {f_d.shape} vs {q_prev.shape}")
    a = hard_assignments(f_d.data @ q_prev.data.T, active)
    return attn.forward(q_prev) + matmul(Tensor(a), f_d)


def overlap_ratio(m_prev, m_pc, n: int) -> float:
    """Best class-overlap fraction of cluster ``n``'s claimed region.

    Both maps are binarized internally by per-pixel argmax (ties toward the
    lowest index); ``m_prev`` must already be resampled to the same pixel grid
    as ``m_pc``. Returns 0 for an empty cluster region.
    """
    prev = np.asarray(getattr(m_prev, "data", m_prev))
    pc = np.asarray(getattr(m_pc, "data", m_pc))
    if prev.shape[0] != pc.shape[0]:
        raise DimensionError(f"overlap_ratio: pixel counts differ, {prev.shape} vs {pc.shape}")
    region = pc.argmax(axis=1) == n
    size = int(region.sum())
    if size == 0:
        return 0.0
    labels = prev.argmax(axis=1)
    counts = np.bincount(labels[region], minlength=prev.shape[1])
    return float(counts.max()) / size


def select_active_clusters(m_prev, m_pc, tau: float, foreground_only: bool = False) -> np.ndarray:
    """Keep clusters whose overlap ratio exceeds ``tau``; never deactivate all.

    With ``foreground_only`` the background column of ``m_prev`` is excluded
    from the per-cluster max (class regions are still carved out by argmax
    over all columns).
    """
    if not 0.0 <= tau <= 1.0:
        raise UsageError(f"tau {tau} outside [0, 1]")
    prev = np.asarray(getattr(m_prev, "data", m_prev))
    pc = np.asarray(getattr(m_pc, "data", m_pc))
    n_clusters = pc.shape[1]
    overlaps = np.zeros(n_clusters)
    labels = prev.argmax(axis=1)
    regions = pc.argmax(axis=1)
    lo = 1 if foreground_only else 0
    for n in range(n_clusters):
        region = regions == n
        size = int(region.sum())
        if size == 0:
            continue
        counts = np.bincount(labels[region], minlength=prev.shape[1])
        overlaps[n] = counts[lo:].max() / size
    active = overlaps > tau
    if not active.any():
        active[int(overlaps.argmax())] = True
    return active


class MaskDecoder(Module):
    def __init__(self, cfg: MaskDecoderConfig, d_q: int, num_classes: int, rng: np.random.Generator):
        if cfg.num_queries <= num_classes:
            raise ConfigError(
                f"num_queries ({cfg.num_queries}) must exceed num_classes ({num_classes})"
            )
        self.cfg = cfg
        self.num_classes = num_classes
        self.query_init = Parameter("queries", (cfg.num_queries, d_q), rng, fan_in=d_q)
        self.attn = MultiHeadSelfAttention("attn", d_q, cfg.num_heads, rng)
        self.class_head = MLP("class_head", [d_q, d_q, num_classes + 1], rng)

    def run(self, pyramid: FeaturePyramid, epoch: int) -> DecoderOutput:
        """Six-layer pass over the pyramid taps; returns final queries and all masks."""
        cfg = self.cfg
        n = cfg.num_queries
        q = self.query_init.tensor
        layers = []
        prev_mask = None  # (spatial..., K+1) ndarray of the previous layer's mask
        for li, stride in enumerate(cfg.layer_strides()):
            if stride not in pyramid.f_scales:
                raise ConfigError(f"pyramid is missing scale 1/{stride}")
            f4 = pyramid.f_scales[stride]
            spatial = f4.shape[:3]
            p_l = int(np.prod(spatial))
            f_d = reshape(f4, (p_l, f4.shape[3]))

            if li == 0 or not cfg.filtering:
                active = np.ones(n, dtype=bool)
            else:
                tau = tau_schedule(epoch) if cfg.schedule else cfg.fixed_tau
                prev_here = prev_mask if prev_mask.shape[:3] == spatial else trilinear_forward(
                    np.ascontiguousarray(prev_mask), spatial
                )
                scores = f_d.data @ q.data.T
                active = select_active_clusters(
                    prev_here.reshape(p_l, -1), scores, tau,
                    foreground_only=not cfg.background_overlap,
                )

            assignments = hard_assignments(f_d.data @ q.data.T, active)
            q = update_queries(q, f_d, active, self.attn)
            m_pc = pixel_to_cluster(f_d, q, cfg.similarity)
            m_cc = cluster_to_class(q, self.class_head)
            m = aggregate_masks(m_pc, m_cc)
            layers.append(LayerMasks(stride, spatial, active, assignments, m_pc, m_cc, m))
            prev_mask = m.data.reshape(spatial + (self.num_classes + 1,))
        return DecoderOutput(queries=q, layers=layers)
