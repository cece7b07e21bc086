#!/usr/bin/env python
# coding: utf-8

"""
This script times the dense matvec against the bitmask matvec over a grid of sparsities,
payload widths and thread counts, and writes one CSV per thread count to results/.

Usage: python self_speedup.py [ROWSxCOLS]
"""

import logging
import os
from sys import argv
from time import time

from sparsekit.bench import run_bench, write_csv
from sparsekit.config import parse_shape
from sparsekit.saving import compose_filename

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

start_time = time()

shape = parse_shape(argv[1]) if len(argv) > 1 else (4096, 12288)
sparsities = [0.0, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
value_widths = ["fp32", "fp16", "int8"]
thread_counts = [1, os.cpu_count() or 1] if (os.cpu_count() or 1) > 1 else [1]
reps = 50

write_dir = os.path.join(os.getcwd(), "results")
os.makedirs(write_dir, exist_ok=True)

for threads in thread_counts:
    print(f"Timing {shape[0]}x{shape[1]} on {threads} thread(s).")
    results = run_bench(shape, sparsities, value_widths, reps=reps, warmup=5, threads=threads)
    path = os.path.join(write_dir, compose_filename("bench", "csv", f"{shape[0]}x{shape[1]}", f"t{threads}"))
    frame = write_csv(results, path)
    print(frame[["sparsity", "value_width", "median_ns", "gbps", "self_speedup"]].to_string(index=False))
    print(f"\tWritten to {path}. Time passed {time() - start_time:.1f}s")

print("All done.")
