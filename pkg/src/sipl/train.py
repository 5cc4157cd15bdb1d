"""Training loop, SGD optimizer, checkpoints, and metrics files.

Every source of randomness is a pure function of (seed, purpose, index), so a
run is reproducible from its config text alone and a resumed run is
bit-identical to an uninterrupted one. Metrics are written as JSON lines
(config first, one record per epoch, summary last) plus a CSV table; floats
go through ``repr`` so files are byte-stable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import PhantomSpec, VolumeSample, dsc, generate_phantom, mean_dsc
from .errors import ConfigError
from .model import SIPLModel, build_model


def derived_rng(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    tag = int.from_bytes(purpose.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, int(index)]))


class SGD:
    """Stochastic gradient descent with classical momentum and weight decay."""

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=1e-5):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.moments = [np.zeros_like(p.tensor.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, m in zip(self.params, self.moments):
            g = p.tensor.grad
            if g is None:
                continue
            np.multiply(m, self.momentum, out=m)
            m += g + self.weight_decay * p.tensor.data
            p.tensor.data -= lr * m


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


def phantom_dataset(cfg: ExperimentConfig, split: str, count: int) -> list[VolumeSample]:
    """Deterministic phantom list; train and validation pools never overlap."""
    offset = {"train": 0, "val": 1_000_000, "test": 2_000_000}.get(split)
    if offset is None:
        raise ConfigError(f"unknown dataset split: {split}")
    samples = []
    for i in range(count):
        spec = PhantomSpec(
            extents=tuple(cfg.data.extents),
            num_classes=cfg.data.num_classes,
            noise_sigma=cfg.data.noise_sigma,
            intensity_jitter=cfg.data.intensity_jitter,
            seed=cfg.seed + offset + i,
        )
        sample = generate_phantom(spec)
        sample.id = f"{split}-{i:03d}"
        samples.append(sample)
    return samples


@dataclass
class TrainState:
    epoch: int = 0
    model: SIPLModel | None = None
    optimizer: SGD | None = None
    history: list = field(default_factory=list)


def save_checkpoint(path, cfg: ExperimentConfig, state: TrainState):
    arrays = {"__epoch__": np.array(state.epoch, dtype=np.int64)}
    for name, p in state.model.named_parameters():
        arrays[f"param::{name}"] = p.tensor.data
    for (name, _p), m in zip(state.model.named_parameters(), state.optimizer.moments):
        arrays[f"moment::{name}"] = m
    arrays["__config__"] = np.frombuffer(cfg.to_text().encode(), dtype=np.uint8)
    arrays["__history__"] = np.frombuffer(json.dumps(state.history).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        cfg = ExperimentConfig.from_text(bytes(z["__config__"]).decode())
        epoch = int(z["__epoch__"])
        history = json.loads(bytes(z["__history__"]).decode())
        params = {k[len("param::"):]: z[k] for k in z.files if k.startswith("param::")}
        moments = {k[len("moment::"):]: z[k] for k in z.files if k.startswith("moment::")}
    return cfg, epoch, params, moments, history


def restore_model(path):
    """Rebuild a model (and optimizer moments) exactly as saved."""
    cfg, epoch, params, moments, history = load_checkpoint(path)
    model = build_model(cfg)
    named = dict(model.named_parameters())
    if set(named) != set(params):
        raise ConfigError("checkpoint parameters do not match the model built from its config")
    for name, p in named.items():
        if p.tensor.data.shape != params[name].shape:
            raise ConfigError(f"checkpoint shape mismatch for {name}")
        p.tensor.data[...] = params[name]
    opt = SGD(
        model.parameters(),
        lr=cfg.optim.lr,
        momentum=cfg.optim.momentum,
        weight_decay=cfg.optim.weight_decay,
    )
    for (name, _p), m in zip(model.named_parameters(), opt.moments):
        m[...] = moments[name]
    return cfg, model, opt, epoch, history


def _round6(x: float) -> float:
    return float(f"{x:.6g}")


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    metrics_jsonl: Path
    metrics_csv: Path
    history: list
    final_val_dsc: float


def train(cfg: ExperimentConfig, out_dir, resume_from=None, epoch_hook=None) -> TrainResult:
    """Run (or resume) one training job and write checkpoint plus metrics."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        saved_cfg, model, opt, start_epoch, history = restore_model(resume_from)
        if saved_cfg.to_text() != cfg.to_text():
            raise ConfigError("resume checkpoint was produced by a different config")
    else:
        model = build_model(cfg)
        opt = SGD(
            model.parameters(),
            lr=cfg.optim.lr,
            momentum=cfg.optim.momentum,
            weight_decay=cfg.optim.weight_decay,
        )
        start_epoch = 0
        history = []

    train_set = phantom_dataset(cfg, "train", cfg.data.train_count)
    val_set = phantom_dataset(cfg, "val", cfg.data.val_count)

    def validate(epoch: int) -> float:
        if not val_set:
            return float("nan")
        scores = [
            mean_dsc(model.predict_labels(s.intensities, epoch), s.labels, cfg.data.num_classes)
            for s in val_set
        ]
        return float(np.mean(scores))

    for epoch in range(start_epoch, cfg.train.epochs):
        lr = cosine_lr(cfg.optim.lr, epoch, cfg.train.epochs) if cfg.optim.cosine else cfg.optim.lr
        order = derived_rng(cfg.seed, "order", epoch).permutation(len(train_set))
        seg_sum = 0.0
        aux_sum = 0.0
        total_sum = 0.0
        for idx in order:
            sample = train_set[idx]
            opt.zero_grad()
            total, report = model.compute_loss(sample.intensities, sample.labels, epoch)
            total.backward()
            opt.step(lr)
            seg_sum += report.seg
            aux_sum += sum(report.aux_per_layer)
            total_sum += report.total
        n = len(train_set)
        record = {
            "epoch": epoch,
            "lr": _round6(lr),
            "seg": _round6(seg_sum / n),
            "aux": _round6(aux_sum / n),
            "total": _round6(total_sum / n),
        }
        if cfg.train.val_every and (epoch % cfg.train.val_every == 0 or epoch == cfg.train.epochs - 1):
            record["val_mean_dsc"] = _round6(validate(epoch))
        history.append(record)
        if epoch_hook is not None:
            epoch_hook(epoch, model, opt, history)
        if cfg.train.checkpoint_every and (epoch + 1) % cfg.train.checkpoint_every == 0:
            save_checkpoint(
                out_dir / f"checkpoint-{epoch + 1:04d}.npz",
                cfg,
                TrainState(epoch + 1, model, opt, history),
            )

    final_val = validate(cfg.train.epochs)
    ckpt = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt, cfg, TrainState(cfg.train.epochs, model, opt, history))

    jsonl = out_dir / "metrics.jsonl"
    with open(jsonl, "w") as fh:
        fh.write(json.dumps({"config": cfg.to_text()}) + "\n")
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"final": {"epochs": cfg.train.epochs, "val_mean_dsc": _round6(final_val)}}) + "\n")

    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w") as fh:
        fh.write("epoch,lr,seg,aux,total,val_mean_dsc\n")
        for rec in history:
            val = rec.get("val_mean_dsc", "")
            fh.write(f"{rec['epoch']},{rec['lr']},{rec['seg']},{rec['aux']},{rec['total']},{val}\n")

    return TrainResult(out_dir, ckpt, jsonl, csv_path, history, final_val)


def evaluate(model: SIPLModel, samples, num_classes: int, epoch: int = 10**9):
    """Per-sample, per-class dice table plus an aggregate mean row."""
    if not samples:
        raise ConfigError("evaluation dataset is empty")
    rows = []
    for s in samples:
        pred = model.predict_labels(s.intensities, epoch)
        per_class = [dsc(pred, s.labels, k) for k in range(1, num_classes + 1)]
        rows.append({"id": s.id, "per_class": per_class, "mean": float(np.mean(per_class))})
    agg = [float(np.mean([r["per_class"][k] for r in rows])) for k in range(num_classes)]
    rows.append({"id": "mean", "per_class": agg, "mean": float(np.mean(agg))})
    return rows


def write_eval_tables(rows, num_classes: int, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "dsc.csv"
    header = ["sample"] + [f"dsc_{k}" for k in range(1, num_classes + 1)] + ["avg"]
    with open(csv_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            cells = [r["id"]] + [repr(_round6(v)) for v in r["per_class"]] + [repr(_round6(r["mean"]))]
            fh.write(",".join(cells) + "\n")
    json_path = out_dir / "dsc.json"
    with open(json_path, "w") as fh:
        json.dump({"classes": num_classes, "rows": rows}, fh, indent=2)
        fh.write("\n")
    return csv_path, json_path
