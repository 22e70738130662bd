"""Repeated training runs, evaluation reports, ablations and run-directory bookkeeping."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import data
from .metrics import AggregateReport, VideoMetrics, aggregate, write_report_csv
from .model import OFFLINE, Tunes, TunesConfig, build_model, save_checkpoint
from .training import TrainConfig, TrainResult, evaluate, single_threaded, train

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- configuration


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value.strip()


@dataclass
class ExperimentConfig:
    model: TunesConfig
    train: TrainConfig
    runs: int = 5


def parse_overrides(lines: Iterable[str]) -> dict[str, str]:
    """``key=value`` pairs; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), **defaults) -> ExperimentConfig:
    """Read a key=value file, then apply ``overrides`` (also key=value strings).

    Keys may be bare field names or prefixed with ``model.`` / ``train.``.
    ``mode=offline`` switches the model defaults to the offline variant
    (eight Transformer blocks) unless the block count is set explicitly.
    """
    pairs: dict[str, str] = {k: str(v) for k, v in defaults.items()}
    if path is not None:
        pairs.update(parse_overrides(Path(path).read_text().splitlines()))
    pairs.update(parse_overrides(overrides))

    model_fields = {f.name: f for f in dataclasses.fields(TunesConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    model_kw: dict = {}
    train_kw: dict = {}
    runs = 5
    for key, value in pairs.items():
        scope, _, name = key.rpartition(".")
        if name == "runs" and scope in ("", "experiment"):
            runs = int(value)
        elif name in model_fields and scope in ("", "model"):
            model_kw[name] = value
        elif name in train_fields and scope in ("", "train"):
            train_kw[name] = value
        else:
            raise ValueError(f"unknown configuration key {key!r}")

    base = TunesConfig.offline() if model_kw.get("mode") == OFFLINE else TunesConfig()
    model_kw = {k: _coerce(v, getattr(base, k)) for k, v in model_kw.items()}
    train_kw = {k: _coerce(v, getattr(TrainConfig(), k)) for k, v in train_kw.items()}
    model_cfg = dataclasses.replace(base, **model_kw)
    return ExperimentConfig(model_cfg, TrainConfig(**train_kw), runs)


def config_to_lines(cfg: ExperimentConfig) -> list[str]:
    lines = [f"runs={cfg.runs}"]
    for prefix, obj in (("model", cfg.model), ("train", cfg.train)):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{prefix}.{f.name}={v}")
    return lines


# ---------------------------------------------------------------- run directories


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(
    run_dir: Path,
    command: str,
    inputs: Sequence[str | Path] = (),
    config: ExperimentConfig | None = None,
    seeds: Sequence[int] = (),
    extra: Mapping | None = None,
) -> Path:
    """Record inputs, config, seeds and the checksum of every artifact in ``run_dir``."""
    run_dir = Path(run_dir)
    target = run_dir / "run_manifest.json"
    artifacts = {
        str(p.relative_to(run_dir)): sha256_file(p)
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p != target
    }
    doc = {
        "command": command,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "config": config_to_lines(config) if config is not None else [],
        "seeds": list(seeds),
        "artifacts": artifacts,
    }
    if extra:
        doc.update(extra)
    target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return target


# ---------------------------------------------------------------- datasets


def load_split(manifest: str | Path, split: str, num_classes: int = 255) -> list[data.PhaseDatasetEntry]:
    paths = data.read_manifest(manifest)[split]
    if not paths:
        raise ValueError(f"manifest {manifest} has no {split!r} entries")
    return [data.read_sequence(p, num_classes) for p in paths]


def synthetic_benchmark(
    seed: int = 0, n_train: int = 20, n_val: int = 5, n_test: int = 10, **kw
) -> dict[str, list[data.PhaseDatasetEntry]]:
    """The default desk-scale benchmark: disjoint train/val/test synthetic videos."""
    videos = data.synth_generate(seed, n_train + n_val + n_test, **kw)
    return {
        "train": videos[:n_train],
        "val": videos[n_train : n_train + n_val],
        "test": videos[n_train + n_val :],
    }


def write_dataset(splits: Mapping[str, Sequence[data.PhaseDatasetEntry]], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    listing = {}
    for split, videos in splits.items():
        names = []
        for v in videos:
            name = f"{v.video_id}.fseq"
            data.write_sequence(v, out_dir / name)
            names.append(name)
        listing[split] = names
    manifest = out_dir / "manifest.txt"
    data.write_manifest(listing, manifest)
    return manifest


# ---------------------------------------------------------------- baselines


def linear_baseline_accuracy(
    train_videos: Sequence[data.PhaseDatasetEntry], test_videos: Sequence[data.PhaseDatasetEntry]
) -> float:
    """Mean video-wise accuracy of a single-frame multinomial logistic regression."""
    from sklearn.linear_model import LogisticRegression

    x = np.concatenate([v.features for v in train_videos])
    y = np.concatenate([v.labels for v in train_videos])
    clf = LogisticRegression(max_iter=2000).fit(x, y)
    return float(np.mean([np.mean(clf.predict(v.features) == v.labels) for v in test_videos]))


# ---------------------------------------------------------------- experiments


@dataclass
class RunOutcome:
    seed: int
    result: TrainResult
    strict: list[VideoMetrics]
    relaxed: list[VideoMetrics]


@dataclass
class ExperimentResult:
    runs: list[RunOutcome]
    strict: AggregateReport
    relaxed: AggregateReport

    def metric(self, name: str, statistic: str = "M") -> float:
        return self.strict.get(name, statistic)


def run_seeds(
    splits: Mapping[str, Sequence[data.PhaseDatasetEntry]],
    model_config: TunesConfig,
    train_config: TrainConfig,
    seeds: Sequence[int],
) -> ExperimentResult:
    """Train one model per seed on train/val and evaluate each on the test split."""
    for split in ("train", "test"):
        if not splits.get(split):
            raise ValueError(f"missing {split!r} split")
    outcomes = []
    with single_threaded():
        for seed in seeds:
            model = build_model(model_config, seed)
            tcfg = dataclasses.replace(train_config, seed=seed)
            result = train(model, splits["train"], splits.get("val", ()), tcfg)
            outcomes.append(
                RunOutcome(
                    seed,
                    result,
                    evaluate(model, splits["test"]),
                    evaluate(model, splits["test"], relaxed=True),
                )
            )
            log.info("seed %d: best epoch %d", seed, result.best_epoch)
    return ExperimentResult(
        outcomes,
        aggregate([o.strict for o in outcomes]),
        aggregate([o.relaxed for o in outcomes], prefix="R-"),
    )


def _write_history(path: Path, history: list[dict]) -> None:
    keys = list(dict.fromkeys(k for rec in history for k in rec))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(history)


def _write_video_table(path: Path, outcome_rows: list[tuple[int, str, str, VideoMetrics]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "video", "kind", "accuracy", "precision", "recall", "jaccard", "macro_f1"])
        for seed, vid, kind, m in outcome_rows:
            w.writerow(
                [seed, vid, kind, m.accuracy, m.macro_precision, m.macro_recall, m.macro_jaccard, m.macro_f1]
            )


def plot_report(result: ExperimentResult, path: Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ("accuracy", "precision", "recall", "jaccard", "macro_f1")
    means = [result.strict.get(n) for n in names]
    sds = [result.strict.get(n, "SD_R") for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(names, means, yerr=sds, capsize=4)
    ax.set_ylim(0, 1)
    ax.set_ylabel("test score (mean over runs)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_experiment(
    manifest: str | Path,
    config: ExperimentConfig,
    out_dir: str | Path,
    seeds: Sequence[int] | None = None,
) -> ExperimentResult:
    """Train ``config.runs`` seeds, evaluate strict and relaxed metrics, write CSV/plot artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    c = config.model.num_classes
    splits = {s: load_split(manifest, s, c) for s in ("train", "test")}
    if data.read_manifest(manifest)["val"]:
        splits["val"] = load_split(manifest, "val", c)
    seeds = list(range(config.runs)) if seeds is None else list(seeds)
    result = run_seeds(splits, config.model, config.train, seeds)

    write_report_csv(result.strict.rows + result.relaxed.rows, out_dir / "metrics.csv")
    rows = []
    for o in result.runs:
        for v, m in zip(splits["test"], o.strict):
            rows.append((o.seed, v.video_id, "strict", m))
        for v, m in zip(splits["test"], o.relaxed):
            rows.append((o.seed, v.video_id, "relaxed", m))
        _write_history(out_dir / f"history_seed{o.seed}.csv", o.result.history)
        save_checkpoint(o.result.model, out_dir / f"model_seed{o.seed}.npz")
    _write_video_table(out_dir / "videos.csv", rows)
    plot_report(result, out_dir / "metrics.png", f"{config.model.mode} TUNeS, {len(seeds)} runs")
    (out_dir / "config.txt").write_text("\n".join(config_to_lines(config)) + "\n")
    inputs = [Path(manifest)] + [p for ps in data.read_manifest(manifest).values() for p in ps]
    write_run_manifest(out_dir, "train", inputs, config, seeds)
    return result


ABLATIONS = (
    "full",
    "no_transformer_conv",
    "no_token_masking",
    "no_augmentation",
    "no_attention",
    "no_mask_alternation",
)


def ablation_variant(name: str, config: ExperimentConfig) -> ExperimentConfig:
    """The experiment config for one ablation; ``blocks<n>`` sets the Transformer block count."""
    m, t = config.model, config.train
    if name == "full":
        pass
    elif name == "no_transformer_conv":
        m = dataclasses.replace(m, transformer_conv=False)
    elif name == "no_token_masking":
        t = dataclasses.replace(t, token_masking=False)
    elif name == "no_augmentation":
        t = dataclasses.replace(t, augment=False)
    elif name == "no_attention":
        m = dataclasses.replace(m, attention=False)
    elif name == "no_mask_alternation":
        if m.mode != OFFLINE:
            raise ValueError("mask alternation only exists in offline mode")
        m = dataclasses.replace(m, alternate_masks=False)
    elif name.startswith("blocks"):
        m = dataclasses.replace(m, num_transformer_blocks=int(name[len("blocks") :]))
    else:
        raise ValueError(f"unknown ablation {name!r}")
    return ExperimentConfig(m, t, config.runs)


def run_ablations(
    splits: Mapping[str, Sequence[data.PhaseDatasetEntry]],
    config: ExperimentConfig,
    variants: Sequence[str],
    seeds: Sequence[int],
) -> dict[str, ExperimentResult]:
    out = {}
    for name in variants:
        cfg = ablation_variant(name, config)
        out[name] = run_seeds(splits, cfg.model, cfg.train, seeds)
    return out


def write_ablation_report(results: Mapping[str, ExperimentResult], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "metric", "statistic", "value"])
        for name, res in results.items():
            for m, s, v in res.strict.rows:
                w.writerow([name, m, s, repr(v)])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(results)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, metric in zip(axes, ("accuracy", "jaccard")):
        ax.bar(
            names,
            [results[n].strict.get(metric) for n in names],
            yerr=[results[n].strict.get(metric, "SD_R") for n in names],
            capsize=3,
        )
        ax.set_title(metric)
        ax.tick_params(axis="x", rotation=45, labelsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "ablations.png", dpi=120)
    plt.close(fig)
