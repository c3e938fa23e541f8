"""Wall-clock micro-benchmarks: NA vs dense attention, NAIFI, backbone, and
full-model forward, with median/p5/p95 over repetitions and CSV output.

Timing discipline: monotonic clock, fixed warmup, single process. BLAS pools
are pinned to one thread for the duration of a run so the only parallelism
is the library's own row-partitioning, which the ``threads`` column reports.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .decoder import DecoderSpec
from .encoder import Encoder, EncoderSpec
from .errors import ConfigError, ParameterError
from .model import LeDetr, ModelConfig
from .na import NaConfig, dense_attention_oracle, na_forward, zero_bias
from .rng import Rng64
from .tensor import Tensor4, init_normal

TARGETS = ("na_forward", "dense_attention_oracle", "naifi", "backbone", "full")
BENCH_HEADS = 8
BENCH_HEAD_DIM = 32


@dataclass(frozen=True)
class BenchRow:
    target: str
    hw: tuple[int, int]
    k: int
    threads: int
    median_ms: float
    p5_ms: float
    p95_ms: float


@dataclass
class LatencyReport:
    rows: list[BenchRow]
    reps: int
    warmup: int

    def format(self) -> str:
        header = (
            f"{'target':<24} {'hw':>9} {'k':>3} {'threads':>7} "
            f"{'median_ms':>11} {'p5_ms':>11} {'p95_ms':>11}"
        )
        lines = [f"reps={self.reps} warmup={self.warmup}", header]
        for r in self.rows:
            lines.append(
                f"{r.target:<24} {r.hw[0]}x{r.hw[1]:>4} {r.k:>3} {r.threads:>7} "
                f"{r.median_ms:>11.3f} {r.p5_ms:>11.3f} {r.p95_ms:>11.3f}"
            )
        return "\n".join(lines)


def time_fn(fn, reps: int, warmup: int) -> tuple[float, float, float]:
    """(median, p5, p95) wall-clock milliseconds of ``fn`` over ``reps`` runs."""
    if reps < 10:
        raise ParameterError(f"reps must be >= 10, got {reps}")
    if warmup < 3:
        raise ParameterError(f"warmup must be >= 3, got {warmup}")
    for _ in range(warmup):
        fn()
    times = np.empty(reps, dtype=np.float64)
    for i in range(reps):
        t0 = time.perf_counter()
        fn()
        times[i] = (time.perf_counter() - t0) * 1e3
    p5, median, p95 = np.percentile(times, [5.0, 50.0, 95.0])
    return float(median), float(p5), float(p95)


def _na_target(hw, k, threads, seed):
    rng = Rng64(seed)
    cfg = NaConfig(k, BENCH_HEADS, BENCH_HEAD_DIM)
    shape = (hw[0], hw[1], cfg.width)
    q = init_normal(rng, shape, 1.0)
    k_ = init_normal(rng, shape, 1.0)
    v = init_normal(rng, shape, 1.0)
    bias = zero_bias(cfg)
    return lambda: na_forward(q, k_, v, bias, cfg, threads=threads)


def _dense_target(hw, seed):
    rng = Rng64(seed)
    n = hw[0] * hw[1]
    shape = (n, BENCH_HEADS, BENCH_HEAD_DIM)
    q = init_normal(rng, shape, 1.0)
    k_ = init_normal(rng, shape, 1.0)
    v = init_normal(rng, shape, 1.0)
    return lambda: dense_attention_oracle(q, k_, v)


def _naifi_target(hw, threads, seed):
    rng = Rng64(seed)
    spec = EncoderSpec()
    enc = Encoder.create(rng, spec)
    s5 = Tensor4(init_normal(rng, (1, spec.in_channels[2], hw[0], hw[1]), 1.0))
    return enc.naifi_kernel_for(hw), lambda: enc.naifi_forward(s5, threads=threads)


def _backbone_target(hw, threads, scale, seed):
    cfg = ModelConfig(scale=scale, input_hw=hw, seed=seed, threads=threads)
    model = LeDetr.build(cfg)
    x = Tensor4(init_normal(Rng64(seed + 1), (1, 3, hw[0], hw[1]), 1.0))
    return lambda: model.backbone.forward(x, threads=threads)


def _full_target(hw, threads, scale, layers, seed):
    tokens = (hw[0] // 8) * (hw[1] // 8) + (hw[0] // 16) * (hw[1] // 16) + (hw[0] // 32) * (
        hw[1] // 32
    )
    queries = DecoderSpec().queries
    if tokens < queries:
        raise ConfigError(
            f"full-model target needs >= {queries} memory tokens, got {tokens} at {hw}"
        )
    cfg = ModelConfig(scale=scale, input_hw=hw, inference_layers=layers, seed=seed)
    model = LeDetr.build(cfg)
    x = Tensor4(init_normal(Rng64(seed + 1), (1, 3, hw[0], hw[1]), 1.0))
    return lambda: model.forward(x, n_layers=layers, threads=threads)


def run_bench(
    targets: list[str],
    hw: tuple[int, int],
    reps: int,
    warmup: int,
    threads: int = 1,
    k: int = 7,
    scale: str = "M",
    layers: int = 6,
    seed: int = 0,
) -> LatencyReport:
    for t in targets:
        if t not in TARGETS:
            raise ConfigError(f"unknown bench target {t!r}; valid: {', '.join(TARGETS)}")
    rows = []
    with threadpool_limits(limits=1):
        for t in targets:
            kcol = k
            if t == "na_forward":
                fn = _na_target(hw, k, threads, seed)
            elif t == "dense_attention_oracle":
                fn = _dense_target(hw, seed)
                kcol = 0  # unwindowed
            elif t == "naifi":
                kcol, fn = _naifi_target(hw, threads, seed)
            elif t == "backbone":
                fn = _backbone_target(hw, threads, scale, seed)
            else:
                fn = _full_target(hw, threads, scale, layers, seed)
            median, p5, p95 = time_fn(fn, reps, warmup)
            rows.append(BenchRow(t, hw, kcol, threads, median, p5, p95))
    return LatencyReport(rows, reps, warmup)


CSV_COLUMNS = "target,hw,k,threads,median_ms,p5_ms,p95_ms"


def write_csv(report: LatencyReport, path: str) -> None:
    with open(path, "w") as f:
        f.write(f"# reps={report.reps} warmup={report.warmup}\n")
        f.write(CSV_COLUMNS + "\n")
        for r in report.rows:
            f.write(
                f"{r.target},{r.hw[0]}x{r.hw[1]},{r.k},{r.threads},"
                f"{r.median_ms!r},{r.p5_ms!r},{r.p95_ms!r}\n"
            )


def read_csv(path: str) -> LatencyReport:
    """Inverse of write_csv; round-trips to an equal LatencyReport."""
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f]
    if not lines or not lines[0].startswith("# "):
        raise ConfigError(f"{path} is not a benchmark CSV")
    meta = dict(part.split("=") for part in lines[0][2:].split())
    if lines[1] != CSV_COLUMNS:
        raise ConfigError(f"unexpected CSV columns {lines[1]!r}")
    rows = []
    for line in lines[2:]:
        if not line:
            continue
        target, hw, k, threads, median, p5, p95 = line.split(",")
        h, w = hw.split("x")
        rows.append(
            BenchRow(
                target, (int(h), int(w)), int(k), int(threads),
                float(median), float(p5), float(p95),
            )
        )
    return LatencyReport(rows, int(meta["reps"]), int(meta["warmup"]))
