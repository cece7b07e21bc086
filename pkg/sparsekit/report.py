"""
Render a run directory into report.md and report_*.csv tables.

Inputs (all optional): config.txt, summary.json, runs.csv, quant.csv, bench*.csv.
Column order of every table is fixed by the *_COLUMNS constants below.
"""

import glob
import json
import logging
import os

import pandas as pd

from sparsekit.formats import VALUE_BITS, bits_per_weight, sparsity_to_compression_ratio, theoretical_speedup

__all__ = ["RECOVERY_COLUMNS",
           "QUANT_COLUMNS",
           "BENCH_COLUMNS",
           "recovery_table",
           "quant_table",
           "bench_table",
           "render_report",
           "write_report"]

logger = logging.getLogger(__name__)

RECOVERY_COLUMNS = ["sparsity", "compression_ratio", "pattern", "variant", "accuracy", "accuracy_std",
                    "entropy", "train_entropy", "diverged", "failed", "seeds"]
QUANT_COLUMNS = ["sparsity", "pattern", "variant", "fp32_accuracy", "int8_accuracy", "delta",
                 "bits_per_weight_int8"]
BENCH_COLUMNS = ["source", "shape_rows", "shape_cols", "sparsity", "value_width", "threads", "median_ns",
                 "gbps", "bits_per_weight", "theoretical_speedup", "self_speedup"]

# dense baseline of the kernels computes in fp32
DENSE_BITS = VALUE_BITS["fp32"]


def _ratio(s):
    return sparsity_to_compression_ratio(s) if s < 1 else float("inf")


def recovery_table(runs):
    """ Seed-averaged accuracy and entropy per (sparsity, pattern, variant). """
    runs = runs.copy()
    runs["pattern"] = runs["pattern"].fillna("")
    runs["failed"] = runs["error"].fillna("").astype(str).str.len() > 0
    table = runs.groupby(["sparsity", "pattern", "variant"], sort=True).agg(
        accuracy=("accuracy", "mean"), accuracy_std=("accuracy", "std"),
        entropy=("entropy", "mean"), train_entropy=("train_entropy", "mean"),
        diverged=("diverged", "sum"), failed=("failed", "sum"), seeds=("seed", "count")).reset_index()
    table["compression_ratio"] = table["sparsity"].map(_ratio)
    return table[RECOVERY_COLUMNS]


def quant_table(quant):
    quant = quant.copy()
    quant["pattern"] = quant["pattern"].fillna("")
    table = quant.groupby(["sparsity", "pattern", "variant"], sort=True)[
        ["fp32_accuracy", "int8_accuracy", "delta"]].mean().reset_index()
    table["bits_per_weight_int8"] = [bits_per_weight(VALUE_BITS["int8"], 1.0 - s) for s in table["sparsity"]]
    return table[QUANT_COLUMNS]


def bench_table(frames):
    """
    Stack benchmark CSVs and add the storage-model columns next to the measured
    self-speedup; sparsity-0 rows are dense kernels with theoretical speedup 1.
    """
    rows = []
    for source, frame in frames.items():
        frame = frame.copy()
        frame.insert(0, "source", source)
        rows.append(frame)
    table = pd.concat(rows, ignore_index=True)
    density = 1.0 - table["sparsity"]
    value_bits = table["value_width"].map(VALUE_BITS)
    table["bits_per_weight"] = [DENSE_BITS if s == 0 else bits_per_weight(b, d)
                                for s, b, d in zip(table["sparsity"], value_bits, density)]
    table["theoretical_speedup"] = [1.0 if s == 0 else theoretical_speedup(DENSE_BITS, b, d)
                                    for s, b, d in zip(table["sparsity"], value_bits, density)]
    return table[BENCH_COLUMNS]


def _markdown(frame):
    return frame.to_markdown(index=False, floatfmt=".4f")


def _read(run_dir, name, missing):
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        missing.append(name)
        return None
    return pd.read_csv(path, keep_default_na=True)


def render_report(run_dir):
    """
    Build the report of a run directory.

    OUTPUT:
        - text: markdown
        - tables: dict name -> DataFrame (recovery, quant, bench; only those present)
        - missing: list of expected artifacts that were not found
    """
    missing, tables = [], {}
    sections = [f"# Sparse fine-tuning report: {os.path.basename(os.path.normpath(run_dir))}"]

    summary_path = os.path.join(run_dir, "summary.json")
    if os.path.exists(summary_path):
        with open(summary_path) as f:
            summary = json.load(f)
        teacher = summary.get("teacher", {})
        if teacher:
            sections.append("## Teacher\n\n" + "\n".join(f"- {k}: {v}" for k, v in sorted(teacher.items())))

    runs = _read(run_dir, "runs.csv", missing)
    if runs is None or runs.empty:
        sections.append("## No runs\n\nThis directory holds no recovery runs.")
    else:
        tables["recovery"] = recovery_table(runs)
        sections.append("## Accuracy vs sparsity\n\n" + _markdown(tables["recovery"]))
        failed = runs[runs["error"].fillna("").astype(str).str.len() > 0]
        if len(failed):
            sections.append("## Failed runs\n\n" + _markdown(failed[["sparsity", "variant", "seed", "error"]]))

    quant = _read(run_dir, "quant.csv", missing)
    if quant is not None and not quant.empty:
        tables["quant"] = quant_table(quant)
        sections.append("## INT8 post-training quantization\n\n" + _markdown(tables["quant"]))

    bench_files = sorted(glob.glob(os.path.join(run_dir, "bench*.csv")))
    if bench_files:
        frames = {os.path.basename(p): pd.read_csv(p) for p in bench_files}
        tables["bench"] = bench_table(frames)
        sections.append("## Kernel benchmarks\n\n" + _markdown(tables["bench"]))
    else:
        missing.append("bench*.csv")

    if missing:
        sections.append("## Missing artifacts\n\n" + "\n".join(f"- {name}" for name in missing))
    return "\n\n".join(sections) + "\n", tables, missing


def write_report(run_dir):
    """ Write report.md and report_<table>.csv into the run directory. """
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    text, tables, missing = render_report(run_dir)
    with open(os.path.join(run_dir, "report.md"), "w") as f:
        f.write(text)
    for name, table in tables.items():
        table.to_csv(os.path.join(run_dir, f"report_{name}.csv"), index=False)
    if missing:
        logger.warning("report of %s is partial, missing %s", run_dir, ", ".join(missing))
    return os.path.join(run_dir, "report.md"), tables, missing
