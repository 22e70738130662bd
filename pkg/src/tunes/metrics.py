"""Video-wise phase recognition metrics and their aggregation over videos and runs.

Phase-wise scores of phase ``p`` on a video are omitted (NaN, ``defined`` is
False) when ``p`` does not occur in that video's ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PHASE_METRICS = ("precision", "recall", "jaccard")
VIDEO_METRICS = ("accuracy", "precision", "recall", "jaccard", "macro_f1", "macro_f1_harmonic")
REPORT_COLUMNS = ("metric", "statistic", "value")


def _div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


@dataclass
class VideoMetrics:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    jaccard: np.ndarray
    f1: np.ndarray
    defined: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision[self.defined]))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall[self.defined]))

    @property
    def macro_jaccard(self) -> float:
        return float(np.mean(self.jaccard[self.defined]))

    @property
    def macro_f1(self) -> float:
        """Average of the phase-wise F1 scores."""
        return float(np.mean(self.f1[self.defined]))

    @property
    def macro_f1_harmonic(self) -> float:
        """Harmonic mean of macro precision and macro recall."""
        p, r = self.macro_precision, self.macro_recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def value(self, name: str) -> float:
        if name == "accuracy":
            return self.accuracy
        if name in PHASE_METRICS:
            return getattr(self, f"macro_{name}")
        return getattr(self, name)


def confusion_counts(y, y_hat, num_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-phase true positives, false positives and false negatives."""
    y = np.asarray(y, dtype=np.int64)
    y_hat = np.asarray(y_hat, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y - 1, y_hat - 1), 1)
    tp = np.diag(cm)
    return tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp


def video_metrics(y, y_hat, num_classes: int) -> VideoMetrics:
    y = np.asarray(y, dtype=np.int64)
    y_hat = np.asarray(y_hat, dtype=np.int64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("empty label sequence")
    for arr in (y, y_hat):
        if arr.min() < 1 or arr.max() > num_classes:
            raise ValueError(f"labels must lie in [1, {num_classes}]")
    tp, fp, fn = confusion_counts(y, y_hat, num_classes)
    defined = (tp + fn) > 0
    # a phase that is annotated but never predicted gets precision 0
    precision = _div(tp, tp + fp)
    recall = _div(tp, tp + fn)
    jaccard = _div(tp, tp + fp + fn)
    f1 = _div(2 * precision * recall, precision + recall)
    nan = np.where(defined, 1.0, np.nan)
    return VideoMetrics(
        accuracy=float(np.mean(y == y_hat)),
        precision=precision * nan,
        recall=recall * nan,
        jaccard=jaccard * nan,
        f1=f1 * nan,
        defined=defined,
    )


def f1_score(videos: Sequence[VideoMetrics]) -> float:
    """Harmonic mean of the mean video-wise precision and the mean video-wise recall."""
    if not videos:
        raise ValueError("no videos")
    p = float(np.mean([v.macro_precision for v in videos]))
    r = float(np.mean([v.macro_recall for v in videos]))
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def relaxed_predictions(
    y,
    y_hat,
    tolerance: int = 10,
    allowed: Callable[[int, int], bool] | None = None,
) -> np.ndarray:
    """Prediction with boundary errors near annotated transitions forgiven.

    In the first ``tolerance`` frames of a ground-truth segment, predicting the
    preceding segment's phase counts as correct; in the last ``tolerance``
    frames, predicting the following segment's phase does. ``allowed(gt,
    pred)`` can restrict which phase pairs are forgiven.
    """
    y = np.asarray(y, dtype=np.int64)
    out = np.array(y_hat, dtype=np.int64, copy=True)
    if out.shape != y.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {out.shape}")
    cuts = np.flatnonzero(np.diff(y)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [y.size]])
    for i, (a, b) in enumerate(zip(starts, stops)):
        p = y[a]
        if i > 0:
            prev = y[starts[i - 1]]
            if allowed is None or allowed(p, prev):
                head = slice(a, min(a + tolerance, b))
                seg = out[head]
                seg[seg == prev] = p
        if i + 1 < len(starts):
            nxt = y[starts[i + 1]]
            if allowed is None or allowed(p, nxt):
                tail = slice(max(b - tolerance, a), b)
                seg = out[tail]
                seg[seg == nxt] = p
    return out


def relaxed_metrics(
    y,
    y_hat,
    num_classes: int,
    tolerance_s: float = 10.0,
    fps: float = 1.0,
    allowed: Callable[[int, int], bool] | None = None,
) -> VideoMetrics:
    """Metrics computed on the boundary-relaxed prediction."""
    tol = int(round(tolerance_s * fps))
    return video_metrics(y, relaxed_predictions(y, y_hat, tol, allowed), num_classes)


# ---------------------------------------------------------------- aggregation


def _sd(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


@dataclass
class AggregateReport:
    rows: list[tuple[str, str, float]] = field(default_factory=list)

    def get(self, metric: str, statistic: str = "M") -> float:
        for m, s, v in self.rows:
            if m == metric and s == statistic:
                return v
        raise KeyError((metric, statistic))

    def as_dict(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for m, s, v in self.rows:
            out.setdefault(m, {})[s] = v
        return out


def aggregate(runs: Sequence[Sequence[VideoMetrics]], prefix: str = "") -> AggregateReport:
    """Mean and standard deviations over videos, phases and runs.

    ``M`` is the mean over runs of the mean over videos. ``SD_V`` and ``SD_P``
    are computed within each run and averaged over runs; ``SD_R`` is the
    spread of the per-run means. All SDs are sample standard deviations.
    """
    if not runs or not all(runs):
        raise ValueError("need at least one run with at least one video")
    n_videos = len(runs[0])
    if any(len(r) != n_videos for r in runs):
        raise ValueError("every run must evaluate the same number of videos")
    report = AggregateReport()
    for name in VIDEO_METRICS:
        values = np.array([[v.value(name) for v in run] for run in runs])
        run_means = values.mean(axis=1)
        stats = [
            ("M", float(run_means.mean())),
            ("SD_V", float(np.mean([_sd(r) for r in values]))),
        ]
        if name in PHASE_METRICS:
            per_phase = []
            for run in runs:
                table = np.array([getattr(v, name) for v in run])
                with np.errstate(all="ignore"):
                    means = np.nanmean(table, axis=0)
                per_phase.append(means[~np.isnan(means)])
            stats.append(("M_P", float(np.mean([p.mean() for p in per_phase]))))
            stats.append(("SD_P", float(np.mean([_sd(p) for p in per_phase]))))
        stats.append(("SD_R", _sd(run_means)))
        report.rows += [(prefix + name, s, v) for s, v in stats]
    f1s = [f1_score(run) for run in runs]
    report.rows += [(prefix + "f1", "M", float(np.mean(f1s))), (prefix + "f1", "SD_R", _sd(f1s))]
    return report


def write_report_csv(report: AggregateReport | Iterable[tuple[str, str, float]], path: str | Path) -> None:
    rows = report.rows if isinstance(report, AggregateReport) else list(report)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for m, s, v in rows:
            w.writerow([m, s, repr(float(v))])


def read_report_csv(path: str | Path) -> AggregateReport:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != REPORT_COLUMNS:
            raise ValueError(f"unexpected columns {header}")
        return AggregateReport([(m, s, float(v)) for m, s, v in r])
