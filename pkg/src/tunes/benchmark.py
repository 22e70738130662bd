"""Inference latency and peak-memory measurements on synthetic feature sequences."""

from __future__ import annotations

import csv
import ctypes
import gc
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .model import TunesConfig, build_model, count_parameters
from .training import single_threaded

DEFAULT_LENGTHS = (450, 900, 1800, 3600, 7200)
BENCHMARK_COLUMNS = (
    "config",
    "length",
    "latency_mean_ms",
    "latency_sd_ms",
    "peak_memory_bytes",
    "parameters",
    "status",
)


def _proc_status(field_name: str) -> int | None:
    try:
        text = Path("/proc/self/status").read_text()
    except OSError:
        return None
    m = re.search(rf"{field_name}:\s+(\d+) kB", text)
    return int(m.group(1)) * 1024 if m else None


def _release_free_heap() -> None:
    # hand cached, already-freed heap pages back to the OS so that the RSS
    # high-water mark reflects this call's allocations
    try:
        ctypes.CDLL("libc.so.6").malloc_trim(0)
    except (OSError, AttributeError):
        pass


def _reset_peak_rss() -> bool:
    try:
        Path("/proc/self/clear_refs").write_text("5")
        return True
    except OSError:
        return False


def peak_forward_memory(fn) -> int:
    """Peak resident memory above the pre-call level while running ``fn``.

    Uses the CUDA allocator statistics on GPU and the kernel's resettable
    RSS high-water mark (``VmHWM``) otherwise; returns -1 if neither exists.
    """
    if torch.cuda.is_available():
        torch.cuda.synchronize()
        torch.cuda.reset_peak_memory_stats()
        base = torch.cuda.memory_allocated()
        fn()
        torch.cuda.synchronize()
        return torch.cuda.max_memory_allocated() - base
    gc.collect()
    _release_free_heap()
    if not _reset_peak_rss():
        fn()
        return -1
    base = _proc_status("VmRSS")
    fn()
    peak = _proc_status("VmHWM")
    if base is None or peak is None:
        return -1
    return max(peak - base, 0)


def _pad_length(length: int, multiple: int) -> int:
    return -(-length // multiple) * multiple


@dataclass
class BenchmarkRow:
    config: str
    length: int
    latency_mean_ms: float
    latency_sd_ms: float
    peak_memory_bytes: int
    parameters: int
    status: str = "ok"


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow] = field(default_factory=list)
    warmup: int = 0
    reps: int = 0

    def series(self, config: str, column: str = "latency_mean_ms") -> tuple[np.ndarray, np.ndarray]:
        rows = [r for r in self.rows if r.config == config and r.status == "ok"]
        return np.array([r.length for r in rows]), np.array([getattr(r, column) for r in rows])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BENCHMARK_COLUMNS)
            for r in self.rows:
                w.writerow([getattr(r, c) for c in BENCHMARK_COLUMNS])

    def plot(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(10, 4))
        for name in dict.fromkeys(r.config for r in self.rows):
            rows = [r for r in self.rows if r.config == name and r.status == "ok"]
            if not rows:
                continue
            label = f"{name} ({rows[0].parameters / 1e6:.2f} M params)"
            lengths = [r.length for r in rows]
            ax_t.errorbar(
                lengths,
                [r.latency_mean_ms for r in rows],
                yerr=[r.latency_sd_ms for r in rows],
                marker="o",
                capsize=3,
                label=label,
            )
            ax_m.plot(lengths, [r.peak_memory_bytes / 2**20 for r in rows], marker="o", label=label)
        ax_t.set(xlabel="sequence length (frames)", ylabel="latency (ms)")
        ax_m.set(xlabel="sequence length (frames)", ylabel="peak memory (MiB)")
        ax_t.legend(fontsize=8)
        fig.suptitle(f"mean of {self.reps} runs after {self.warmup} warm-up runs")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def benchmark(
    configs: Mapping[str, TunesConfig],
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    warmup: int = 100,
    reps: int = 1000,
    seed: int = 0,
) -> BenchmarkReport:
    """Time the forward pass of each config on random inputs of each length.

    Runs single-threaded in inference mode. Lengths are padded up to the
    coarsest scale. An out-of-memory failure becomes a row with
    ``status="oom"``.
    """
    report = BenchmarkReport(warmup=warmup, reps=reps)
    with single_threaded(), torch.inference_mode():
        for name, cfg in configs.items():
            model = build_model(cfg, seed).eval()
            n_params = count_parameters(model)
            for length in lengths:
                gen = torch.Generator().manual_seed(seed + length)
                padded = _pad_length(length, cfg.scales[-1])
                try:
                    x = torch.randn(1, padded, cfg.input_dim, generator=gen)
                    for _ in range(warmup):
                        model(x)
                    times = np.empty(reps)
                    for i in range(reps):
                        t0 = time.perf_counter()
                        model(x)
                        times[i] = time.perf_counter() - t0
                    memory = peak_forward_memory(lambda: model(x))
                except (MemoryError, RuntimeError) as err:
                    if isinstance(err, RuntimeError) and "memory" not in str(err).lower():
                        raise
                    report.rows.append(BenchmarkRow(name, length, float("nan"), float("nan"), -1, n_params, "oom"))
                    continue
                finally:
                    gc.collect()
                sd = float(times.std(ddof=1) * 1e3) if reps > 1 else 0.0
                report.rows.append(
                    BenchmarkRow(name, length, float(times.mean() * 1e3), sd, memory, n_params)
                )
    return report
