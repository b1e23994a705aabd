"""Inference latency and tensor-memory benchmarks for network variants."""

from __future__ import annotations

import csv
import gc
import io
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractError
from .segnet import NetConfig, SegNet, build_network, forward
from .tensor import Tensor, no_grad, track_memory

DEFAULT_WARMUP = 3
DEFAULT_RUNS = 30
CSV_FIELDS = ("variant", "median_s", "mean_s", "cv", "peak_bytes", "param_bytes")


@dataclass
class BenchReport:
    variant: str
    input_shape: tuple[int, ...]
    warmup: int
    runs: int
    times: list[float] = field(default_factory=list)
    peak_bytes: int = 0
    param_bytes: int = 0

    @property
    def median(self) -> float:
        return statistics.median(self.times)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.times)

    @property
    def cv(self) -> float:
        """Coefficient of variation (population std / mean) of the run times."""
        return statistics.pstdev(self.times) / self.mean

    def row(self) -> dict:
        return {"variant": self.variant, "median_s": self.median, "mean_s": self.mean, "cv": self.cv,
                "peak_bytes": self.peak_bytes, "param_bytes": self.param_bytes}


def param_bytes(net: SegNet) -> int:
    return sum(p.data.nbytes for p in net.parameters())


def _random_input(net: SegNet, input_shape, seed: int = 0) -> Tensor:
    dtype = net.params["head.weight"].dtype
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(tuple(input_shape)), dtype=dtype)


def measure_inference(net: SegNet, input_shape, warmup: int = DEFAULT_WARMUP, runs: int = DEFAULT_RUNS,
                      seed: int = 0) -> BenchReport:
    """Time ``runs`` single forward passes after ``warmup`` untimed ones.

    The same random input is reused for every run; BLAS is pinned to one
    thread and the garbage collector is paused for comparability.
    """
    if runs < 3:
        raise ContractError(f"runs must be >= 3, got {runs}")
    if warmup < 1:
        raise ContractError(f"warmup must be >= 1, got {warmup}")
    x = _random_input(net, input_shape, seed)
    report = BenchReport(net.config.variant, tuple(input_shape), warmup, runs,
                         param_bytes=param_bytes(net))
    gc_was_enabled = gc.isenabled()
    gc.disable()  # as timeit does: keep collector pauses out of the timings
    try:
        with threadpool_limits(limits=1), no_grad():
            for _ in range(warmup):
                forward(net, x)
            for _ in range(runs):
                t0 = time.perf_counter()
                forward(net, x)
                report.times.append(time.perf_counter() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    report.peak_bytes = measure_memory(net, input_shape, seed)
    return report


def measure_memory(net: SegNet, input_shape, seed: int = 0) -> int:
    """Peak live tensor bytes (parameters + input + activations) over one inference pass."""
    x = _random_input(net, input_shape, seed)
    with no_grad(), track_memory(baseline=param_bytes(net) + x.data.nbytes) as tracker:
        out = forward(net, x)
        del out
    return tracker.peak


def compare_variants(configs: Sequence[NetConfig], input_shape, warmup: int = DEFAULT_WARMUP,
                     runs: int = DEFAULT_RUNS) -> tuple[list[BenchReport], str]:
    """Benchmark each config; returns the reports and a CSV ranking.

    Rows are ordered by median latency; a ``memory_rank`` column gives the
    order by peak bytes.
    """
    if len(configs) < 2:
        raise ContractError("compare_variants needs at least two configs")
    reports = [measure_inference(build_network(cfg), input_shape, warmup, runs) for cfg in configs]
    return reports, ranking_csv(reports)


def ranking_csv(reports: Sequence[BenchReport]) -> str:
    by_time = sorted(range(len(reports)), key=lambda i: (reports[i].median, i))
    by_mem = sorted(range(len(reports)), key=lambda i: (reports[i].peak_bytes, i))
    mem_rank = {idx: r + 1 for r, idx in enumerate(by_mem)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*CSV_FIELDS, "time_rank", "memory_rank"])
    for rank, i in enumerate(by_time, start=1):
        row = reports[i].row()
        w.writerow([row["variant"], f"{row['median_s']:.6g}", f"{row['mean_s']:.6g}", f"{row['cv']:.4f}",
                    row["peak_bytes"], row["param_bytes"], rank, mem_rank[i]])
    return buf.getvalue()


def format_table(reports: Sequence[BenchReport]) -> str:
    r0 = reports[0]
    head = (f"# input {r0.input_shape}, warmup {r0.warmup}, runs {r0.runs}, single-threaded CPU\n"
            f"{'variant':<10} {'median_s':>10} {'mean_s':>10} {'cv':>7} {'peak_MB':>9} {'param_KB':>9}")
    lines = [head]
    for r in reports:
        lines.append(f"{r.variant:<10} {r.median:>10.5f} {r.mean:>10.5f} {r.cv:>7.3f} "
                     f"{r.peak_bytes / 2**20:>9.3f} {r.param_bytes / 1024:>9.2f}")
    return "\n".join(lines)


def variant_configs(base: NetConfig, variants=("baseline", "se", "cbam")) -> list[NetConfig]:
    return [replace(base, variant=v) for v in variants]
