"""Synthetic 3D phantoms, bit-exact volume file I/O, and segmentation metrics.

Phantoms are noisy intensity volumes containing one ellipsoid or box per
foreground class, painted in class order so later classes carve earlier ones
out. Intensities pass through float32 once at generation time so the file
format's 32-bit payload round-trips bit-exactly.

Volume files hold two consecutive records (intensities, then labels), each:

    8-byte magic "SIPLVOL1" | u32 version=1 | u32 rank | rank x u32 extents |
    u8 element code (1 = f32, 2 = u8) | row-major payload | u32 CRC32(payload)

all little-endian. Readers reject unknown magic, version, or element codes
and report the byte offset of any fault.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, FormatError, PhantomSpecError

MAGIC = b"SIPLVOL1"
VERSION = 1
ELEM_F32 = 1
ELEM_U8 = 2


@dataclass
class ShapeSpec:
    kind: str  # "ellipsoid" or "box"
    center_margin: float = 0.15  # fraction of each extent kept clear of the border
    radius_range: tuple = (0.12, 0.28)  # radii as fractions of each extent

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "box"):
            raise PhantomSpecError(f"unknown shape kind: {self.kind}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise PhantomSpecError(f"bad radius range {self.radius_range}")
        if hi > 0.5:
            raise PhantomSpecError(f"radius fraction {hi} exceeds the volume")


@dataclass
class PhantomSpec:
    extents: tuple = (32, 32, 32)
    num_classes: int = 3
    shapes: list = field(default_factory=list)  # one ShapeSpec per class
    intensity_means: list = field(default_factory=list)  # one per class, background first
    intensity_jitter: float = 0.08  # per-sample shift of each class mean
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise PhantomSpecError("need at least one foreground class")
        if not self.shapes:
            kinds = ["ellipsoid", "box"]
            self.shapes = [ShapeSpec(kinds[k % 2]) for k in range(self.num_classes)]
        if len(self.shapes) != self.num_classes:
            raise PhantomSpecError("need one shape spec per class")
        if not self.intensity_means:
            # spread class means well clear of the 0.1 background and each other,
            # so per-sample jitter shifts distributions without collapsing them
            if self.num_classes == 1:
                self.intensity_means = [0.65]
            else:
                step = 0.6 / (self.num_classes - 1)
                self.intensity_means = [0.35 + step * k for k in range(self.num_classes)]
        if len(self.intensity_means) != self.num_classes:
            raise PhantomSpecError("need one intensity mean per class")


@dataclass
class VolumeSample:
    intensities: Tensor  # (H, W, Z, 1)
    labels: np.ndarray  # (H, W, Z) int64 in {0..K}
    id: str = ""


def _paint(labels: np.ndarray, spec: ShapeSpec, class_id: int, rng: np.random.Generator):
    extents = labels.shape
    center = [
        rng.uniform(spec.center_margin * n, (1.0 - spec.center_margin) * n) for n in extents
    ]
    radii = [rng.uniform(spec.radius_range[0] * n, spec.radius_range[1] * n) for n in extents]
    grids = np.ogrid[: extents[0], : extents[1], : extents[2]]
    if spec.kind == "ellipsoid":
        dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
        labels[dist <= 1.0] = class_id
    else:
        inside = np.ones(extents, dtype=bool)
        for g, c, r in zip(grids, center, radii):
            inside &= (g >= c - r) & (g <= c + r)
        labels[inside] = class_id


def generate_phantom(spec: PhantomSpec) -> VolumeSample:
    """Deterministic sample for a given spec; regenerates on an empty class."""
    if any(n < 4 for n in spec.extents):
        raise PhantomSpecError(f"extents {spec.extents} too small to place shapes")
    for attempt in range(64):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, attempt]))
        labels = np.zeros(spec.extents, dtype=np.int64)
        for k in range(spec.num_classes):
            _paint(labels, spec.shapes[k], k + 1, rng)
        present = np.unique(labels)
        if all(k + 1 in present for k in range(spec.num_classes)):
            break
    else:
        raise PhantomSpecError("could not realize a phantom with every class present")

    background = 0.1
    intens = np.full(spec.extents, background)
    for k in range(spec.num_classes):
        level = spec.intensity_means[k] + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
        intens[labels == k + 1] = level
    if spec.noise_sigma > 0:
        intens += rng.normal(0.0, spec.noise_sigma, size=spec.extents)
    # quantize once through f32 so file round-trips are bit-exact
    intens = intens.astype(np.float32).astype(np.float64)
    return VolumeSample(
        intensities=Tensor(intens[..., None]),
        labels=labels,
        id=f"phantom-{spec.seed}",
    )


def _write_record(fh, arr: np.ndarray, elem_code: int):
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", elem_code))
    payload = np.ascontiguousarray(arr).tobytes()
    fh.write(payload)
    fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def _read_exact(fh, n: int, what: str) -> bytes:
    off = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: expected {n} bytes of {what} at byte {off}", off)
    return buf


_ELEM_DTYPES = {ELEM_F32: np.dtype("<f4"), ELEM_U8: np.dtype("u1")}


def _read_record(fh) -> np.ndarray:
    off = fh.tell()
    magic = _read_exact(fh, 8, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte {off}", off)
    off = fh.tell()
    version, rank = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte {off}", off)
    if not 1 <= rank <= 8:
        raise FormatError(f"implausible rank {rank} at byte {off + 4}", off + 4)
    extents = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
    off = fh.tell()
    (elem_code,) = struct.unpack("<B", _read_exact(fh, 1, "element code"))
    if elem_code not in _ELEM_DTYPES:
        raise FormatError(f"unknown element code {elem_code} at byte {off}", off)
    dtype = _ELEM_DTYPES[elem_code]
    count = int(np.prod(extents))
    payload = _read_exact(fh, count * dtype.itemsize, "payload")
    off = fh.tell()
    (crc,) = struct.unpack("<I", _read_exact(fh, 4, "checksum"))
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != actual:
        raise FormatError(f"CRC mismatch at byte {off}: stored {crc:#010x}, computed {actual:#010x}", off)
    return np.frombuffer(payload, dtype=dtype).reshape(extents)


def save_volume(sample: VolumeSample, path):
    path = Path(path)
    with open(path, "wb") as fh:
        _write_record(fh, sample.intensities.data.astype("<f4"), ELEM_F32)
        labels = sample.labels
        if labels.min() < 0 or labels.max() > 255:
            raise FormatError("labels outside u8 range")
        _write_record(fh, labels.astype("u1"), ELEM_U8)


def load_volume(path) -> VolumeSample:
    path = Path(path)
    with open(path, "rb") as fh:
        intens = _read_record(fh)
        if intens.ndim != 4:
            raise FormatError(f"intensity record has rank {intens.ndim}, expected 4")
        labels = _read_record(fh)
        if labels.ndim != 3:
            raise FormatError(f"label record has rank {labels.ndim}, expected 3")
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"trailing bytes at byte {fh.tell() - 1}", fh.tell() - 1)
    if intens.shape[:3] != labels.shape:
        raise FormatError(f"extent mismatch between records: {intens.shape} vs {labels.shape}")
    return VolumeSample(
        intensities=Tensor(intens.astype(np.float64)),
        labels=labels.astype(np.int64),
        id=path.stem,
    )


def dsc(pred: np.ndarray, gt: np.ndarray, k: int) -> float:
    """Dice coefficient of class ``k``: both-empty counts as 1, missed as 0."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"dsc: extents differ, {pred.shape} vs {gt.shape}")
    p = pred == k
    g = gt == k
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def mean_dsc(pred: np.ndarray, gt: np.ndarray, num_classes: int, skip_absent: bool = False) -> float:
    """Unweighted mean of per-class dice over foreground classes 1..K."""
    scores = []
    for k in range(1, num_classes + 1):
        if skip_absent and not (np.asarray(gt) == k).any():
            continue
        scores.append(dsc(pred, gt, k))
    return float(np.mean(scores)) if scores else 1.0


def downsample_labels(labels: np.ndarray, target) -> np.ndarray:
    """Nearest-label downsampling: each target cell reads its source cell center."""
    labels = np.asarray(labels)
    idx = []
    for n_in, n_out in zip(labels.shape, target):
        centers = np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)
        idx.append(centers)
    return labels[np.ix_(*idx)]


def one_hot(labels: np.ndarray, channels: int) -> np.ndarray:
    """Float one-hot encoding with ``channels`` classes, channel 0 = background."""
    flat = np.asarray(labels).reshape(-1)
    out = np.zeros((flat.size, channels))
    out[np.arange(flat.size), flat] = 1.0
    return out.reshape(np.asarray(labels).shape + (channels,))
