"""
Latency benchmark of the dense and bitmask matvec kernels, with the analytic
bytes-moved model used to turn latencies into effective bandwidth.

Every configuration is checked against the dense oracle on the same buffers before it
is timed. Rows report the median over `reps` timed calls after `warmup` untimed calls;
self_speedup is the dense median divided by the configuration's median, both taken
on this machine in the same harness run.
"""

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from sparsekit.compute import round_half_away
from sparsekit.errors import DomainError, ResourceError, SparseKitError
from sparsekit.formats import VALUE_BITS, compress, decompress
from sparsekit.kernels import configure_threads, sparse_matvec, sparse_matvec_tiled
from sparsekit.pruning import magnitude_prune
from sparsekit.tensor import dense_matvec, dense_matvec_parallel, make_rng, random_matrix, random_vector

__all__ = ["BenchResult",
           "CSV_COLUMNS",
           "MIN_REPS",
           "bytes_moved",
           "precheck_bytes",
           "timer_resolution_ns",
           "run_bench",
           "results_frame",
           "write_csv"]

logger = logging.getLogger(__name__)

MIN_REPS = 30
CSV_COLUMNS = ["shape_rows", "shape_cols", "sparsity", "value_width", "threads",
               "median_ns", "mean_ns", "p95_ns", "bytes_moved", "gbps", "self_speedup"]


@dataclass
class BenchResult:
    shape_rows: int
    shape_cols: int
    sparsity: float
    value_width: str
    threads: int
    reps: int
    warmup: int
    median_ns: float
    mean_ns: float
    p95_ns: float
    bytes_moved: int
    gbps: float
    self_speedup: float = float("nan")
    mode: str = "bitmask"
    warnings: list = field(default_factory=list)

    @property
    def shape(self):
        return self.shape_rows, self.shape_cols

    def as_row(self):
        row = asdict(self)
        return {k: row[k] for k in CSV_COLUMNS}


def bytes_moved(shape, value_width, density, mode, nnz=None):
    """
    Bytes a matvec must read for the weights.

    INPUT:
        - shape: (rows, cols)
        - value_width: "fp32", "fp16" or "int8"
        - density: fraction of stored weights, used when nnz is not given
        - mode: "dense" (every weight at value_width) or "bitmask"

    OUTPUT:
        - dense: rows * cols * value_bytes
        - bitmask: ceil(cols / 32) * 4 * rows + nnz * value_bytes, plus 4 * rows of
          scales for int8
    """
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise DomainError(f"shape must be positive, got {shape}")
    if value_width not in VALUE_BITS:
        raise DomainError(f"unknown value width {value_width!r}")
    value_bytes = VALUE_BITS[value_width] // 8
    if mode == "dense":
        return rows * cols * value_bytes
    if mode != "bitmask":
        raise DomainError(f"unknown mode {mode!r}; use 'dense' or 'bitmask'")
    if nnz is None:
        if not 0.0 <= density <= 1.0:
            raise DomainError(f"density must lie in [0, 1], got {density}")
        nnz = int(round_half_away(density * rows * cols))
    total = math.ceil(cols / 32) * 4 * rows + nnz * value_bytes
    if value_width == "int8":
        total += 4 * rows
    return total


def _available_memory():
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return None


def precheck_bytes(shape, value_widths, available=None):
    """
    Estimate the peak allocation of run_bench (source, pruned and oracle dense copies
    plus the largest compressed matrix) and refuse sizes beyond physical memory.
    """
    rows, cols = shape
    peak = 3 * bytes_moved(shape, "fp32", 1.0, "dense")
    peak += max(bytes_moved(shape, w, 1.0, "bitmask") for w in value_widths)
    available = _available_memory() if available is None else available
    if available is not None and peak > available:
        raise ResourceError(f"benchmark of {rows}x{cols} needs about {peak / 2**20:.0f} MiB, "
                            f"only {available / 2**20:.0f} MiB available")
    return peak


def timer_resolution_ns():
    return time.get_clock_info("perf_counter").resolution * 1e9


def _time(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    samples = np.empty(reps, dtype=np.float64)
    for i in range(reps):
        start = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - start
    return samples


def _summarize(samples):
    return float(np.median(samples)), float(np.mean(samples)), float(np.percentile(samples, 95))


def _gate(y, oracle, label):
    if not np.allclose(y, oracle, rtol=1e-5, atol=1e-5 * max(1.0, float(np.max(np.abs(oracle), initial=0.0)))):
        raise SparseKitError(f"{label}: kernel output disagrees with the dense oracle")


def run_bench(shape, sparsities, value_widths=("fp32",), reps=MIN_REPS, warmup=5, threads=1, seed=0):
    """
    Time the dense kernel and the bitmask kernel at every (value width, sparsity).

    INPUT:
        - shape: (rows, cols) of the weight matrix
        - sparsities: magnitude-pruning levels; 0.0 re-times the dense fp32 kernel, which
          gives a self-comparison row
        - value_widths: a width or a sequence of widths for the bitmask payload
        - reps: timed calls per configuration, at least 30
        - warmup: untimed calls before timing
        - threads: 1 runs the sequential kernels, more runs the row-tiled kernels on that
          many numba threads; None takes the pool size, both capped by $SPARSEKIT_THREADS
        - seed: seed of the random weights and input

    OUTPUT:
        - list of BenchResult: the dense fp32 baseline first (self_speedup 1.0), then
          one per (width, sparsity) in input order
    """
    if isinstance(value_widths, str):
        value_widths = (value_widths,)
    if reps < MIN_REPS:
        raise DomainError(f"reps must be >= {MIN_REPS}, got {reps}")
    if warmup < 0 or (threads is not None and threads < 1):
        raise DomainError("warmup must be >= 0 and threads >= 1")
    precheck_bytes(shape, value_widths)
    rows, cols = shape
    threads = configure_threads(threads)
    rng = make_rng(seed)
    W = random_matrix(rows, cols, rng)
    x = random_vector(cols, rng)
    if threads > 1:
        def dense_fn():
            return dense_matvec_parallel(W, x)

        def sparse_kernel(c):
            return sparse_matvec_tiled(c, x, threads=threads)
    else:
        def dense_fn():
            return dense_matvec(W, x)

        def sparse_kernel(c):
            return sparse_matvec(c, x)

    tick = timer_resolution_ns()

    def measure(fn, sparsity, width, nbytes, mode):
        median, mean, p95 = _summarize(_time(fn, reps, warmup))
        warnings = []
        if median < 100 * tick:
            warnings.append(f"median {median:.0f} ns is below 100 timer ticks ({tick:.0f} ns)")
            logger.warning("%s at sparsity %s: %s", width, sparsity, warnings[-1])
        return BenchResult(shape_rows=rows, shape_cols=cols, sparsity=float(sparsity), value_width=width,
                           threads=threads, reps=reps, warmup=warmup, median_ns=median, mean_ns=mean,
                           p95_ns=p95, bytes_moved=int(nbytes), gbps=nbytes / median if median else float("nan"),
                           mode=mode, warnings=warnings)

    dense_bytes = bytes_moved(shape, "fp32", 1.0, "dense")
    _gate(dense_fn(), dense_matvec(W, x), "dense")
    baseline = measure(dense_fn, 0.0, "fp32", dense_bytes, "dense")
    baseline.self_speedup = 1.0
    logger.info("dense %dx%d baseline: median %.0f ns over %d reps", rows, cols, baseline.median_ns, reps)

    results = [baseline]
    for width in value_widths:
        for sparsity in sparsities:
            if sparsity == 0.0:
                result = measure(dense_fn, 0.0, "fp32", dense_bytes, "dense")
            else:
                pruned, _ = magnitude_prune(W, sparsity)
                c = compress(pruned, width)
                _gate(sparse_kernel(c), dense_matvec(decompress(c), x), f"{width} at sparsity {sparsity}")
                result = measure(lambda: sparse_kernel(c), sparsity, width,
                                 bytes_moved(shape, width, c.density, "bitmask", nnz=c.nnz), "bitmask")
            result.self_speedup = baseline.median_ns / result.median_ns if result.median_ns else float("nan")
            logger.info("%s sparsity %.2f: median %.0f ns, %.2f GB/s, self-speedup %.2f",
                        width, sparsity, result.median_ns, result.gbps, result.self_speedup)
            results.append(result)
    return results


def results_frame(results: Sequence[BenchResult]):
    return pd.DataFrame([r.as_row() for r in results], columns=CSV_COLUMNS)


def write_csv(results, path):
    """ One row per configuration with the CSV_COLUMNS schema. """
    frame = results_frame(results)
    frame.to_csv(path, index=False)
    return frame
