"""The composed segmentation model and its training loss.

Wires the backbone, the mask decoder, and the prototype head together.
Ablation switches: with the mask decoder disabled the prototype head pools
under uniform confidences and the auxiliary losses are zero; with the
prototype head disabled a plain learnable prototype table replaces the fused
proposals (prototypes fixed across inputs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, reshape
from .backbone import Backbone, BackboneConfig, FeaturePyramid
from .config import ExperimentConfig
from .data import downsample_labels, one_hot
from .errors import DimensionError
from .ipl import fuse_prototypes, instance_proposals, label_map, predict_masks, resize_mask
from .losses import LossConfig, aux_loss, make_report, seg_loss, total_loss
from .nn import MLP, Module, Parameter
from .smg import DecoderOutput, MaskDecoder, MaskDecoderConfig


@dataclass
class ModelOutput:
    y_hat: Tensor  # (H, W, Z, K) foreground confidences
    pyramid: FeaturePyramid
    decoded: DecoderOutput | None
    mask_full: Tensor  # (H, W, Z, K+1) confidence mask at input resolution
    fused: Tensor  # (K, d) prototypes used for prediction


class SIPLModel(Module):
    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        self.cfg = cfg
        k = cfg.data.num_classes
        b = cfg.backbone
        self.num_classes = k
        self.backbone = Backbone(
            BackboneConfig(
                in_channels=b.in_channels,
                base_channels=b.base_channels,
                d_i=b.d_i,
                d=b.d,
                d_q=b.d_q,
                depth=b.depth,
            ),
            rng,
        )
        if cfg.smg.enabled:
            self.decoder = MaskDecoder(
                MaskDecoderConfig(
                    num_queries=cfg.smg.num_queries,
                    num_heads=cfg.smg.num_heads,
                    similarity=cfg.smg.similarity,
                    filtering=cfg.smg.filtering,
                    schedule=cfg.smg.schedule,
                    fixed_tau=cfg.smg.fixed_tau,
                    background_overlap=cfg.smg.background_overlap,
                    scale_set=cfg.resolved_scales(),
                ),
                d_q=b.d_q,
                num_classes=k,
                rng=rng,
            )
        else:
            self.decoder = None
        if cfg.ipl.enabled:
            self.common = Parameter("common_proposals", (k, b.d_i), rng, fan_in=b.d_i)
            self.fuse_mlp = MLP("fuse", [2 * b.d_i, b.d_i, b.d], rng)
            self.prototype_table = None
        else:
            self.common = None
            self.fuse_mlp = None
            self.prototype_table = Parameter("prototype_table", (k, b.d), rng, fan_in=b.d)

    def forward(self, volume: Tensor, epoch: int = 0) -> ModelOutput:
        cfg = self.cfg
        k = self.num_classes
        pyramid = self.backbone.forward(volume)
        h, w, z, _ = volume.shape

        if self.decoder is not None:
            decoded = self.decoder.run(pyramid, epoch)
            last = decoded.layers[-1]
            m_spatial = reshape(last.masks, last.spatial + (k + 1,))
            mask_full = resize_mask(m_spatial, (h, w, z), cfg.ipl.mask_resize)
        else:
            decoded = None
            mask_full = Tensor(np.full((h, w, z, k + 1), 1.0 / (k + 1)))

        if cfg.ipl.enabled:
            inst = instance_proposals(
                pyramid.f_mid, mask_full, pooling=cfg.ipl.pooling, resize=cfg.ipl.mask_resize
            )
            fused = fuse_prototypes(inst, self.common.tensor, self.fuse_mlp)
        else:
            fused = self.prototype_table.tensor
        y_hat = predict_masks(pyramid.f_out, fused)
        return ModelOutput(y_hat=y_hat, pyramid=pyramid, decoded=decoded, mask_full=mask_full, fused=fused)

    def compute_loss(self, volume: Tensor, labels: np.ndarray, epoch: int = 0):
        """Total training loss for one sample: (graph scalar, numeric report)."""
        cfg = self.cfg
        k = self.num_classes
        if labels.shape != volume.shape[:3]:
            raise DimensionError(f"labels {labels.shape} do not match volume {volume.shape[:3]}")
        loss_cfg = LossConfig(
            alpha=cfg.loss.alpha,
            epsilon=cfg.loss.epsilon,
            clamp=cfg.loss.clamp,
            class_reduce=cfg.loss.class_reduce,
        )
        out = self.forward(volume, epoch)
        y_fg = Tensor(one_hot(labels, k + 1)[..., 1:])
        seg = seg_loss(y_fg, out.y_hat, loss_cfg)

        aux_terms = []
        if out.decoded is not None:
            for layer in out.decoded.layers:
                target = one_hot(downsample_labels(labels, layer.spatial), k + 1)
                target = Tensor(target.reshape(-1, k + 1))
                aux_terms.append(aux_loss(target, layer.masks, loss_cfg))
        total = total_loss(seg, aux_terms, cfg.loss.alpha)
        n_layers = len(out.decoded.layers) if out.decoded is not None else 6
        aux_values = [t.item() for t in aux_terms] or [0.0] * n_layers
        report = make_report(seg.item(), aux_values, cfg.loss.alpha)
        return total, report

    def predict_labels(self, volume: Tensor, epoch: int = 0, threshold: float = 0.5) -> np.ndarray:
        return label_map(self.forward(volume, epoch).y_hat, threshold)


def build_model(cfg: ExperimentConfig, seed=None) -> SIPLModel:
    """Construct a model whose parameters are a pure function of the seed."""
    cfg.validate()
    base = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(base), 0x51D0]))
    return SIPLModel(cfg, rng)
