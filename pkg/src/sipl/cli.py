"""Experiment runner CLI.

Subcommands: train | eval | ablate | gradcheck | gen-data. Common flags:
--config <path>, --seed <u64>, --out <dir>, --override key=value (repeatable).
Exit codes: 0 success, 1 validation failure, 2 config error, 3 I/O error.
SIPL_THREADS caps how many ablation settings run concurrently.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import Tensor, grad_check, mul, tmean
from .config import ExperimentConfig
from .data import load_volume, save_volume
from .errors import ConfigError, FormatError, SiplError, UsageError
from .model import build_model
from .train import evaluate, phantom_dataset, restore_model, train, write_eval_tables

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise FormatError(f"cannot read config {args.config}: {exc}") from exc
        cfg = ExperimentConfig.from_text(text)
    else:
        cfg = ExperimentConfig()
    for override in getattr(args, "override", None) or []:
        if "=" not in override:
            raise ConfigError(f"override must look like key=value, got {override!r}")
        key, _, raw = override.partition("=")
        cfg.apply(key.strip(), raw.strip())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = load_config(args)
    result = train(cfg, args.out, resume_from=args.resume)
    print(f"wrote {result.checkpoint}")
    print(f"wrote {result.metrics_jsonl}")
    print(f"final val mean DSC: {result.final_val_dsc:.4f}")
    return EXIT_OK


def _load_dataset_dir(path: Path):
    files = sorted(path.glob("*.vol"))
    return [load_volume(f) for f in files]


def cmd_eval(args) -> int:
    cfg, model, _opt, _epoch, _hist = restore_model(args.checkpoint)
    if args.data:
        samples = _load_dataset_dir(Path(args.data))
    else:
        samples = phantom_dataset(cfg, args.split, cfg.data.val_count if args.split == "val" else cfg.data.train_count)
    if not samples:
        print("error: evaluation dataset is empty", file=sys.stderr)
        return EXIT_VALIDATION
    k = cfg.data.num_classes
    for s in samples:
        if s.labels.max(initial=0) > k:
            print(
                f"error: sample {s.id} has labels above the checkpoint's {k} classes",
                file=sys.stderr,
            )
            return EXIT_VALIDATION
        if tuple(s.intensities.shape[3:]) != (cfg.backbone.in_channels,):
            print(f"error: sample {s.id} channel count does not match checkpoint", file=sys.stderr)
            return EXIT_VALIDATION
    rows = evaluate(model, samples, k)
    csv_path, json_path = write_eval_tables(rows, k, args.out)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    print(f"mean DSC: {rows[-1]['mean']:.4f}")
    return EXIT_OK


SWEEPS = {"tau", "clusters", "scales", "component"}


def _sweep_settings(cfg: ExperimentConfig, kind: str, values: list[str]):
    """Yield (label, configured copy) per sweep value."""
    for raw in values:
        variant = ExperimentConfig.from_text(cfg.to_text())
        label = raw
        if kind == "tau":
            variant.apply("smg.schedule", "false")
            variant.apply("smg.fixed_tau", raw)
        elif kind == "clusters":
            variant.apply("smg.num_queries", raw)
        elif kind == "scales":
            if raw in ("multi", "all"):
                variant.apply("smg.scales", "")
                label = "multi"
            else:
                variant.apply("smg.scales", raw)
        elif kind == "component":
            low = raw.strip().lower()
            if low in ("full", "sipl"):
                label = "full"
            elif low in ("-ipl", "no-ipl"):
                variant.apply("ipl.enabled", "false")
                label = "-ipl"
            elif low in ("-smg", "no-smg"):
                variant.apply("smg.enabled", "false")
                label = "-smg"
            else:
                raise ConfigError(f"unknown component setting: {raw!r}")
        variant.validate()
        yield label, variant


def run_ablation(cfg: ExperimentConfig, kind: str, values: list[str], out_dir, max_workers=None):
    if kind not in SWEEPS:
        raise ConfigError(f"unknown sweep kind: {kind} (expected one of {sorted(SWEEPS)})")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = list(_sweep_settings(cfg, kind, values))

    def one(item):
        label, variant = item
        run_dir = out_dir / f"{kind}-{label.replace('/', '_')}"
        result = train(variant, run_dir)
        train_last = result.history[-1]["total"] if result.history else float("nan")
        return {
            "setting": f"{kind}={label}",
            "held_out_mean_dsc": result.final_val_dsc,
            "final_train_total": train_last,
        }

    if max_workers is None:
        max_workers = int(os.environ.get("SIPL_THREADS", "1"))
    max_workers = max(1, min(max_workers, len(settings)))
    if max_workers == 1:
        rows = [one(item) for item in settings]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(one, settings))

    table = out_dir / "sweep.csv"
    with open(table, "w") as fh:
        fh.write("setting,held_out_mean_dsc,final_train_total\n")
        for r in rows:
            fh.write(f"{r['setting']},{r['held_out_mean_dsc']!r},{r['final_train_total']!r}\n")
    with open(out_dir / "sweep.json", "w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    return rows, table


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    if "=" not in args.sweep:
        raise ConfigError(f"--sweep must look like kind=v1,v2,... got {args.sweep!r}")
    kind, _, raw = args.sweep.partition("=")
    values = [v for v in raw.split(",") if v]
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows, table = run_ablation(cfg, kind.strip(), values, args.out)
    print(f"wrote {table}")
    for r in rows:
        print(f"{r['setting']}: held-out mean DSC {r['held_out_mean_dsc']:.4f}")
    return EXIT_OK


def gradcheck_config() -> ExperimentConfig:
    """Tiny composed graph: 8^3 volume, depth-3 backbone, K=2, N=4, d_q=8."""
    cfg = ExperimentConfig()
    for key, val in {
        "data.extents": "8,8,8",
        "data.num_classes": "2",
        "data.train_count": "1",
        "data.val_count": "1",
        "backbone.base_channels": "4",
        "backbone.d_i": "16",
        "backbone.d": "8",
        "backbone.d_q": "8",
        "backbone.depth": "3",
        "smg.num_queries": "4",
        "smg.num_heads": "2",
        "train.epochs": "1",
    }.items():
        cfg.apply(key, val)
    return cfg.validate()


def run_gradcheck(cfg: ExperimentConfig, coords_per_tensor=6, rel_tol=1e-3, fault=False, log=print):
    """Finite-difference checks of the full loss and per-module subgraphs."""
    if any(n > 8 for n in cfg.data.extents):
        raise UsageError(f"gradcheck extents {cfg.data.extents} exceed the 8^3 limit")
    model = build_model(cfg)
    sample = phantom_dataset(cfg, "train", 1)[0]
    vol, labels = sample.intensities, sample.labels
    rng = np.random.default_rng(7)

    hook = None
    if fault:
        first = model.named_parameters()[0][0]

        def hook(name, analytic):
            return analytic * 1.5 + 0.05 if name == first else analytic

    sections = []

    def check(title, f, params):
        report = grad_check(
            f, params, h=1e-5, rel_tol=rel_tol, max_coords=coords_per_tensor,
            rng=np.random.default_rng(11), grad_hook=hook,
        )
        log(f"== {title} ==")
        for line in report.lines():
            log("  " + line)
        sections.append(report)
        return report

    def pairs(module):
        return [(name, p.tensor) for name, p in module.named_parameters()]

    check(
        "full graph (seg + aux losses)",
        lambda: model.compute_loss(vol, labels, epoch=3)[0],
        pairs(model),
    )

    def backbone_scalar():
        pyr = model.backbone.forward(vol)
        return tmean(mul(pyr.f_out, pyr.f_out))

    check("backbone subgraph", backbone_scalar, pairs(model.backbone))

    if model.decoder is not None:
        probe = Tensor(rng.normal(size=(cfg.smg.num_queries, cfg.backbone.d_q)))

        def decoder_scalar():
            out = model.decoder.run(model.backbone.forward(vol), epoch=3)
            return tmean(mul(out.queries, probe)) + tmean(mul(out.layers[-1].masks, out.layers[-1].masks))

        check("mask decoder subgraph", decoder_scalar, pairs(model.decoder))
    ok = all(r.passed for r in sections)
    worst = max(r.max_rel_err for r in sections)
    log(f"gradcheck {'PASS' if ok else 'FAIL'}: worst relative error {worst:.3e} (tol {rel_tol:g})")
    return ok, worst


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = load_config(args)
    else:
        cfg = gradcheck_config()
        if args.seed is not None:
            cfg.seed = args.seed
        for override in args.override or []:
            key, _, raw = override.partition("=")
            cfg.apply(key.strip(), raw.strip())
        cfg.validate()
    ok, _worst = run_gradcheck(cfg, fault=args.inject_fault)
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": cfg.data.train_count, "val": cfg.data.val_count}
    written = 0
    for split, count in counts.items():
        for sample in phantom_dataset(cfg, split, count):
            save_volume(sample, out / f"{sample.id}.vol")
            written += 1
    print(f"wrote {written} volumes to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sipl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="path to a key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    common(p_train)
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="per-class DSC table for a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", help="directory of .vol files (default: regenerated phantoms)")
    p_eval.add_argument("--split", default="val", choices=("train", "val"))
    p_eval.set_defaults(fn=cmd_eval)

    p_abl = sub.add_parser("ablate", help="sweep one knob, training per setting")
    common(p_abl)
    p_abl.add_argument("--sweep", required=True, metavar="KIND=V1,V2,...",
                       help="tau=.. | clusters=.. | scales=.. | component=full,-ipl,-smg")
    p_abl.set_defaults(fn=cmd_ablate)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of the composed graph")
    common(p_gc, needs_out=False)
    p_gc.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p_gc.set_defaults(fn=cmd_gradcheck)

    p_gen = sub.add_parser("gen-data", help="write the phantom dataset as .vol files")
    common(p_gen)
    p_gen.set_defaults(fn=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SiplError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
