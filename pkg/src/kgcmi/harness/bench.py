"""Timing of one CMM fusion unit against single-head cross-attention.

Both paths fuse a length-L stream with a partner stream of the same
length. The FLOP column comes from :func:`kgcmi.cmir.flop_count`; wall times
are per call, measured on one BLAS thread.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .. import cmir
from ..errors import ConfigError

ARCHS = ("cmm", "cross_attention")
BENCH_COLUMNS = ["arch", "L", "d", "N", "flops", "wall_ns_median", "wall_ns_p10", "wall_ns_p90"]
DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096)
MIN_SAMPLE_NS = 2_000_000  # below this a single call is too close to timer granularity


@dataclass
class BenchRow:
    arch: str
    L: int
    d: int
    N: int
    flops: int
    wall_ns_median: float
    wall_ns_p10: float
    wall_ns_p90: float
    inner_repeats: int = 1

    def csv_values(self) -> list:
        return [self.arch, self.L, self.d, self.N, self.flops,
                f"{self.wall_ns_median:.1f}", f"{self.wall_ns_p10:.1f}", f"{self.wall_ns_p90:.1f}"]


@dataclass
class BenchResult:
    rows: list[BenchRow]
    slopes: dict[str, float]
    notes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(BENCH_COLUMNS)
        for row in self.rows:
            writer.writerow(row.csv_values())
        return buf.getvalue()


def loglog_slope(lengths, times) -> float:
    """Least-squares slope of log(time) against log(L)."""
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])


def _make_call(arch: str, L: int, d: int, N: int, seed: int):
    rng = np.random.default_rng([seed, L])
    x = rng.normal(size=(1, L, d))
    other = rng.normal(size=(1, L, d))
    if arch == "cmm":
        params = cmir.init_ssm(rng, d, N)
        return lambda: cmir.cmm_unit(params, x, other)
    params = cmir.init_cross_attention(rng, d)
    return lambda: cmir.cross_attention_forward(params, x, other)


def _time_call(fn, repeats: int) -> tuple[list[float], int]:
    fn()  # warm-up
    t0 = time.perf_counter_ns()
    fn()
    single = time.perf_counter_ns() - t0
    inner = 1 if single >= MIN_SAMPLE_NS else math.ceil(MIN_SAMPLE_NS / max(single, 1))
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter_ns() - t0) / inner)
    return samples, inner


def run_benchmark(lengths=DEFAULT_LENGTHS, d: int = 64, N: int = 16, repeats: int = 5,
                  archs=ARCHS, seed: int = 0) -> BenchResult:
    """Time each architecture at each length; median/p10/p90 over ``repeats`` samples."""
    lengths = [int(v) for v in lengths]
    if len(lengths) < 3:
        raise ConfigError("benchmark needs at least three lengths")
    if any(b <= a for a, b in zip(lengths, lengths[1:])) or lengths[0] <= 0:
        raise ConfigError("benchmark lengths must be positive and strictly ascending")
    if repeats < 1:
        raise ConfigError("repeats must be at least 1")
    for arch in archs:
        if arch not in ARCHS:
            raise ConfigError(f"unknown architecture {arch!r}")
    rows, notes, slopes = [], [], {}
    with threadpool_limits(limits=1):
        for arch in archs:
            medians = []
            for L in lengths:
                samples, inner = _time_call(_make_call(arch, L, d, N, seed), repeats)
                if inner > 1:
                    notes.append(f"{arch} L={L}: timed {inner} calls per sample (timer resolution)")
                p10, med, p90 = np.percentile(samples, [10, 50, 90])
                rows.append(BenchRow(arch, L, d, N, cmir.flop_count(arch, L, d, N), float(med),
                                     float(p10), float(p90), inner))
                medians.append(med)
            slopes[arch] = loglog_slope(lengths, medians)
    return BenchResult(rows, slopes, notes)
