"""Command-line entry point: ``python -m tunes <command>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data
from .audit import audit_causality, inject_acausal_downsample
from .benchmark import DEFAULT_LENGTHS, benchmark
from .experiment import (
    ABLATIONS,
    load_config,
    load_split,
    run_ablations,
    run_experiment,
    synthetic_benchmark,
    write_ablation_report,
    write_dataset,
    write_run_manifest,
)
from .metrics import aggregate, write_report_csv
from .model import TunesConfig, build_model, load_checkpoint
from .training import evaluate


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value configuration file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one configuration key (repeatable)",
    )


def _config(args, **defaults):
    return load_config(args.config, args.overrides, **defaults)


def cmd_synth(args) -> int:
    splits = synthetic_benchmark(
        args.seed, args.train, args.val, args.test, feature_dim=args.dim
    )
    manifest = write_dataset(splits, args.out)
    write_run_manifest(args.out, "synth", extra={"seed": args.seed})
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seeds = args.seeds if args.seeds else None
    result = run_experiment(args.manifest, cfg, args.out, seeds)
    print(f"accuracy {result.metric('accuracy'):.4f}  macro jaccard {result.metric('jaccard'):.4f}")
    print(f"artifacts in {args.out}")
    return 0


def cmd_eval(args) -> int:
    models = [load_checkpoint(p) for p in args.checkpoint]
    c = models[0].config.num_classes
    videos = load_split(args.manifest, args.split, c)
    strict = aggregate([evaluate(m, videos) for m in models])
    relaxed = aggregate([evaluate(m, videos, relaxed=True) for m in models], prefix="R-")
    args.out.mkdir(parents=True, exist_ok=True)
    write_report_csv(strict.rows + relaxed.rows, args.out / "metrics.csv")
    write_run_manifest(args.out, "eval", [args.manifest, *args.checkpoint])
    for m, s, v in strict.rows + relaxed.rows:
        if s == "M":
            print(f"{m:20s} {v:.4f}")
    return 0


def cmd_benchmark(args) -> int:
    configs = {}
    for name in args.models:
        if name == "online":
            configs[name] = TunesConfig.online(input_dim=args.input_dim)
        elif name == "offline":
            configs[name] = TunesConfig.offline(input_dim=args.input_dim)
        else:
            raise SystemExit(f"unknown model {name!r}; choose online or offline")
    report = benchmark(configs, args.lengths, args.warmup, args.reps, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out / "benchmark.csv")
    report.plot(args.out / "benchmark.png")
    write_run_manifest(args.out, "benchmark", extra={"seed": args.seed})
    for r in report.rows:
        print(
            f"{r.config:8s} T={r.length:5d} {r.latency_mean_ms:9.2f} ± {r.latency_sd_ms:7.2f} ms "
            f"{r.peak_memory_bytes / 2**20:8.1f} MiB  {r.parameters} params  {r.status}"
        )
    return 0


def cmd_audit(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = build_model(_config(args).model, args.seed)
    if args.inject_acausal_downsample is not None:
        name = inject_acausal_downsample(model, args.inject_acausal_downsample)
        print(f"injected acausal operator at {name}")
    report = audit_causality(model, args.length, args.rows, args.seed)
    print(report.summary())
    return 0 if report.passed else 1


def cmd_ablate(args) -> int:
    cfg = _config(args)
    c = cfg.model.num_classes
    splits = {s: load_split(args.manifest, s, c) for s in ("train", "val", "test")}
    variants = args.variants or [v for v in ABLATIONS if v != "no_mask_alternation" or cfg.model.mode == "offline"]
    seeds = args.seeds or list(range(cfg.runs))
    results = run_ablations(splits, cfg, variants, seeds)
    write_ablation_report(results, args.out)
    write_run_manifest(args.out, "ablate", [args.manifest], cfg, seeds)
    for name, res in results.items():
        print(f"{name:22s} accuracy {res.metric('accuracy'):.4f}  jaccard {res.metric('jaccard'):.4f}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tunes", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phase-labeled dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--val", type=int, default=5)
    p.add_argument("--test", type=int, default=10)
    p.add_argument("--dim", type=int, default=64, help="feature dimension")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and evaluate one model per seed")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="*")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, nargs="+", required=True)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark", help="latency and peak memory versus sequence length")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--models", nargs="+", default=["online", "offline"])
    p.add_argument("--lengths", type=int, nargs="+", default=list(DEFAULT_LENGTHS))
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--input-dim", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("audit-causality", help="gradient audit of an online model")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--length", type=int, default=72)
    p.add_argument("--rows", type=int, help="sampled output rows per scale (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--inject-acausal-downsample",
        type=int,
        metavar="INDEX",
        help="negative control: make encoder downsampler INDEX acausal",
    )
    _add_config_args(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("ablate", help="train ablated variants")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variants", nargs="*", help=f"any of {', '.join(ABLATIONS)} or blocks<n>")
    p.add_argument("--seeds", type=int, nargs="*")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
