"""Efficiency measurement: batched throughput, single-image latency, size accounting."""

from __future__ import annotations

import csv
import gc
import os
import statistics
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .errors import InvalidConfig
from .model import DFMNet
from .tensor import DTYPE, no_grad
from .weights import _items

MB = 1_000_000
WARMUP = 3
REPEATS = 5
N_DEFAULT = 100


def throughput(n: int, batch: int, seconds: float) -> float:
    """Images per second for ``n`` forwards of ``batch`` images taking ``seconds``."""
    if n < 1 or batch < 1:
        raise InvalidConfig("n and batch must be >= 1")
    if not seconds > 0:
        raise InvalidConfig("elapsed time must be positive")
    return n * batch / seconds


def blas_threads() -> int:
    counts = [int(p.get("num_threads", 1)) for p in threadpool_info()]
    return max(counts) if counts else 1


def _inputs(model: DFMNet, batch: int, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if batch < 1:
        raise InvalidConfig("batch must be >= 1")
    if size < 16 or size % 16:
        raise InvalidConfig("input size must be a positive multiple of 16")
    rng = np.random.default_rng(seed)
    rgb = rng.random((batch, 3, size, size)).astype(DTYPE)
    aux = rng.random((batch, model.config.aux_channels, size, size)).astype(DTYPE)
    return rgb, aux


@dataclass
class ThroughputRun:
    n: int
    batch: int
    seconds: float

    @property
    def fps(self) -> float:
        return throughput(self.n, self.batch, self.seconds)


def time_forwards(model: DFMNet, batch: int, n: int = N_DEFAULT, size: int = 256, warmup: int = WARMUP, seed: int = 0) -> ThroughputRun:
    """Wall time of ``n`` batched forwards on a fixed random input, after ``warmup``."""
    if n < 1 or warmup < 0:
        raise InvalidConfig("n must be >= 1 and warmup >= 0")
    rgb, aux = _inputs(model, batch, size, seed)
    model.eval()
    with no_grad():
        for _ in range(warmup):
            model(rgb, aux)
        # collector pauses land in random iterations; keep them out of the timed loop
        enabled = gc.isenabled()
        gc.collect()
        gc.disable()
        try:
            t0 = time.perf_counter()
            for _ in range(n):
                model(rgb, aux)
            elapsed = time.perf_counter() - t0
        finally:
            if enabled:
                gc.enable()
    return ThroughputRun(n, batch, elapsed)


def repeat_throughput(
    model: DFMNet,
    batch: int,
    repeats: int = REPEATS,
    n: int = N_DEFAULT,
    size: int = 256,
    chunk: int = 10,
    warmup: int = WARMUP,
    seed: int = 0,
) -> list[ThroughputRun]:
    """``repeats`` runs of ``n`` forwards each, timed in interleaved chunks.

    Chunks of up to ``chunk`` forwards go round-robin over the runs, so slow
    drift in host speed is shared by all runs instead of landing on one.
    Each run still reports its own ``n`` forwards and their summed wall time.
    """
    if repeats < 1 or chunk < 1 or n < 1 or warmup < 0:
        raise InvalidConfig("repeats, chunk and n must be >= 1 and warmup >= 0")
    rgb, aux = _inputs(model, batch, size, seed)
    model.eval()
    done = [0] * repeats
    spent = [0.0] * repeats
    with no_grad():
        for _ in range(warmup):
            model(rgb, aux)
        enabled = gc.isenabled()
        gc.collect()
        gc.disable()
        try:
            while done[-1] < n:
                for r in range(repeats):
                    k = min(chunk, n - done[r])
                    t0 = time.perf_counter()
                    for _ in range(k):
                        model(rgb, aux)
                    spent[r] += time.perf_counter() - t0
                    done[r] += k
        finally:
            if enabled:
                gc.enable()
    return [ThroughputRun(n, batch, t) for t in spent]


def measure_throughput(model: DFMNet, batch: int, n: int = N_DEFAULT, size: int = 256, warmup: int = WARMUP, seed: int = 0) -> float:
    return time_forwards(model, batch, n, size, warmup, seed).fps


def latency_ms(model: DFMNet, size: int = 256, repeats: int = REPEATS, warmup: int = WARMUP, seed: int = 0) -> float:
    """Median single-image forward time over ``repeats`` runs."""
    if repeats < 1:
        raise InvalidConfig("repeats must be >= 1")
    rgb, aux = _inputs(model, 1, size, seed)
    model.eval()
    times = []
    with no_grad():
        for _ in range(warmup):
            model(rgb, aux)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(rgb, aux)
            times.append(time.perf_counter() - t0)
    return 1000.0 * statistics.median(times)


@dataclass
class SizeReport:
    counts: "OrderedDict[str, int]"  # stored float32 elements per subtree

    def bytes(self, subtree: str) -> int:
        return 4 * self.counts[subtree]

    def mb(self, subtree: str) -> float:
        return self.bytes(subtree) / MB

    @property
    def total_count(self) -> int:
        return sum(self.counts.values())

    @property
    def total_bytes(self) -> int:
        return 4 * self.total_count

    @property
    def total_mb(self) -> float:
        return self.total_bytes / MB

    def table(self) -> list[tuple[str, int, int]]:
        rows = [(k, v, 4 * v) for k, v in self.counts.items()]
        return rows + [("total", self.total_count, self.total_bytes)]

    def format(self) -> str:
        lines = [f"{'subtree':<12} {'params':>10} {'MB':>10}"]
        lines += [f"{k:<12} {c:>10d} {b / MB:>10.4f}" for k, c, b in self.table()]
        return "\n".join(lines)


def size_report(weights) -> SizeReport:
    """Stored tensors grouped by the first component of their name."""
    counts: OrderedDict[str, int] = OrderedDict()
    for name, arr in _items(weights):
        key = name.split(".", 1)[0]
        counts[key] = counts.get(key, 0) + int(np.asarray(arr).size)
    return SizeReport(counts)


@dataclass
class BenchResult:
    t_cpu_ms: float
    s_fps: dict[int, float]
    sizes: SizeReport
    threads: int
    size: int
    n: int
    runs: dict[int, ThroughputRun] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for b, fps in self.s_fps.items():
            run = self.runs.get(b)
            out.append(
                {
                    "batch": b,
                    "n": self.n,
                    "seconds": f"{run.seconds:.6f}" if run else "",
                    "s_fps": f"{fps:.4f}",
                    "t_cpu_ms": f"{self.t_cpu_ms:.4f}",
                    "input_size": self.size,
                    "threads": self.threads,
                    "param_count": self.sizes.total_count,
                    "param_mb": f"{self.sizes.total_mb:.6f}",
                }
            )
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        with open(Path(path), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def run_bench(model: DFMNet, batches=(1, 8, 32), n: int = N_DEFAULT, size: int = 256, threads: int | None = None, seed: int = 0) -> BenchResult:
    """Latency at B=1 plus throughput per batch size; ``threads`` caps BLAS workers."""
    if not batches:
        raise InvalidConfig("at least one batch size required")
    limit = threadpool_limits(limits=threads) if threads is not None else None
    try:
        used = blas_threads()
        t_ms = latency_ms(model, size, seed=seed)
        runs = {b: time_forwards(model, b, n, size, seed=seed) for b in batches}
    finally:
        if limit is not None:
            limit.restore_original_limits()
    return BenchResult(
        t_cpu_ms=t_ms,
        s_fps={b: r.fps for b, r in runs.items()},
        sizes=size_report(model),
        threads=used if used else (os.cpu_count() or 1),
        size=size,
        n=n,
        runs=runs,
    )
