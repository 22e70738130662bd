"""
Latency and memory versus sequence length
=========================================

Attention only runs on the 18x downsampled tokens, so cost grows close to
linearly with video length. This short version uses few repetitions; the
command line tool defaults to 100 warm-up and 1000 timed runs.
"""

from pathlib import Path

from tunes.benchmark import benchmark
from tunes.model import TunesConfig

configs = {"online": TunesConfig.online(), "offline": TunesConfig.offline()}
report = benchmark(configs, lengths=(450, 900, 1800, 3600, 7200), warmup=3, reps=10)

for r in report.rows:
    print(f"{r.config:8s} T={r.length:5d} {r.latency_mean_ms:8.1f} ms  {r.peak_memory_bytes / 2**20:7.1f} MiB")

# %%
for name in configs:
    lengths, latency = report.series(name)
    print(name, "latency ratio 7200/450:", round(latency[-1] / latency[0], 1), "(quadratic would be 256)")

out = Path("benchmark_out")
out.mkdir(exist_ok=True)
report.plot(out / "benchmark.png")
print("figure written to", out / "benchmark.png")
