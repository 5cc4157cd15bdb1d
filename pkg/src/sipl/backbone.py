"""Toy 3D encoder / pixel decoder.

The encoder is a stack of stride-2 convolutions (kernel 3, ReLU) whose channel
width doubles up to the mid-feature width. The decoder walks back up with
nearest-neighbor doubling followed by a stride-1 convolution, adding a 1x1x1
projection of the matching encoder stage (the raw input volume at full
resolution, which has no encoder stage). Three coarse decoder taps are
projected to a common query width and exposed alongside the mid feature and
the full-resolution embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, conv3d, matmul, relu, reshape, upsample2
from .errors import ConfigError
from .nn import Module, Parameter


@dataclass
class BackboneConfig:
    in_channels: int = 1
    base_channels: int = 8
    d_i: int = 64  # mid-feature width
    d: int = 16  # output embedding width
    d_q: int = 32  # query / tap projection width
    depth: int = 5  # number of stride-2 stages; max stride is 2**depth

    def __post_init__(self):
        if min(self.in_channels, self.base_channels, self.d_i, self.d, self.d_q) <= 0:
            raise ConfigError("backbone widths must be positive")
        if not 3 <= self.depth <= 6:
            raise ConfigError(f"backbone depth {self.depth} outside supported range [3, 6]")

    @property
    def max_stride(self) -> int:
        return 2 ** self.depth

    @property
    def tap_strides(self) -> list[int]:
        """The three coarsest decoder scales, coarse first."""
        return [2 ** self.depth, 2 ** (self.depth - 1), 2 ** (self.depth - 2)]

    @property
    def stage_widths(self) -> list[int]:
        widths = [min(self.base_channels * 2 ** i, self.d_i) for i in range(self.depth)]
        widths[-1] = self.d_i
        return widths


@dataclass
class EncoderFeatures:
    f_mid: Tensor
    by_stride: dict = field(default_factory=dict)  # stride -> stage output tensor


@dataclass
class FeaturePyramid:
    f_mid: Tensor  # (H/S, W/S, Z/S, d_i)
    f_scales: dict  # stride -> (H_l, W_l, Z_l, d_q)
    f_out: Tensor  # (H, W, Z, d)


def _project_voxels(x: Tensor, w: Parameter, b: Parameter) -> Tensor:
    """1x1x1 linear projection of a channels-last volume."""
    h, wd, z, _ = x.shape
    flat = reshape(x, (h * wd * z, x.shape[3]))
    out = add(matmul(flat, w.tensor), b.tensor)
    return reshape(out, (h, wd, z, w.tensor.shape[1]))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        widths = cfg.stage_widths
        enc_in = [cfg.in_channels] + widths[:-1]
        self.enc_w = []
        self.enc_b = []
        for i, (ci, co) in enumerate(zip(enc_in, widths)):
            fan = 27 * ci
            self.enc_w.append(Parameter(f"enc{i}.w", (3, 3, 3, ci, co), rng, fan_in=fan))
            self.enc_b.append(Parameter(f"enc{i}.b", (co,), rng, fan_in=fan))

        # Decoder stage j lifts stride 2**(depth-j) to 2**(depth-1-j); its output
        # width mirrors the encoder stage at the finer stride (base width at full
        # resolution). The full-resolution stage has no encoder counterpart, so
        # its skip projects the raw input volume; without that path the output
        # embedding would carry only half-resolution detail.
        dec_out = [widths[cfg.depth - 2 - j] if j <= cfg.depth - 2 else widths[0] for j in range(cfg.depth)]
        dec_in = [cfg.d_i] + dec_out[:-1]
        self.dec_w = []
        self.dec_b = []
        self.skip_w = []
        self.skip_b = []
        for j, (ci, co) in enumerate(zip(dec_in, dec_out)):
            fan = 27 * ci
            self.dec_w.append(Parameter(f"dec{j}.w", (3, 3, 3, ci, co), rng, fan_in=fan))
            self.dec_b.append(Parameter(f"dec{j}.b", (co,), rng, fan_in=fan))
            skip_ci = widths[cfg.depth - 2 - j] if j <= cfg.depth - 2 else cfg.in_channels
            self.skip_w.append(Parameter(f"skip{j}.w", (skip_ci, co), rng, fan_in=skip_ci))
            self.skip_b.append(Parameter(f"skip{j}.b", (co,), rng, fan_in=skip_ci))

        self.tap_w = []
        self.tap_b = []
        tap_in = [cfg.d_i, dec_out[0], dec_out[1]]
        for stride, ci in zip(cfg.tap_strides, tap_in):
            self.tap_w.append(Parameter(f"tap{stride}.w", (ci, cfg.d_q), rng, fan_in=ci))
            self.tap_b.append(Parameter(f"tap{stride}.b", (cfg.d_q,), rng, fan_in=ci))

        self.out_w = Parameter("out.w", (dec_out[-1], cfg.d), rng, fan_in=dec_out[-1])
        self.out_b = Parameter("out.b", (cfg.d,), rng, fan_in=dec_out[-1])
        self._dec_out = dec_out

    def encode(self, volume: Tensor) -> EncoderFeatures:
        h, w, z, c = volume.shape
        s = self.cfg.max_stride
        if h % s or w % s or z % s:
            raise ConfigError(f"input extents {(h, w, z)} not divisible by stride {s}")
        if c != self.cfg.in_channels:
            raise ConfigError(f"expected {self.cfg.in_channels} input channels, got {c}")
        feats = {1: volume}
        x = volume
        for i in range(self.cfg.depth):
            x = relu(conv3d(x, self.enc_w[i].tensor, self.enc_b[i].tensor, stride=2, pad=1))
            feats[2 ** (i + 1)] = x
        return EncoderFeatures(f_mid=x, by_stride=feats)

    def decode(self, encoded: EncoderFeatures) -> FeaturePyramid:
        cfg = self.cfg
        taps = {}
        taps[cfg.max_stride] = _project_voxels(encoded.f_mid, self.tap_w[0], self.tap_b[0])
        x = encoded.f_mid
        for j in range(cfg.depth):
            x = conv3d(upsample2(x), self.dec_w[j].tensor, self.dec_b[j].tensor, stride=1, pad=1)
            stride = 2 ** (cfg.depth - 1 - j)
            x = add(x, _project_voxels(encoded.by_stride[stride], self.skip_w[j], self.skip_b[j]))
            x = relu(x)
            if j == 0:
                taps[cfg.tap_strides[1]] = _project_voxels(x, self.tap_w[1], self.tap_b[1])
            elif j == 1:
                taps[cfg.tap_strides[2]] = _project_voxels(x, self.tap_w[2], self.tap_b[2])
        f_out = _project_voxels(x, self.out_w, self.out_b)
        return FeaturePyramid(f_mid=encoded.f_mid, f_scales=taps, f_out=f_out)

    def forward(self, volume: Tensor) -> FeaturePyramid:
        return self.decode(self.encode(volume))
