"""
Concatenates the frames written by simulations.py and tabulates accuracy recovery.
"""

from glob import glob
from os.path import join

import pandas as pd

from sparsekit.report import recovery_table

base_dir = "results"

run_files = glob(join(base_dir, "runs_*.pkl"))
quant_files = glob(join(base_dir, "quant_*.pkl"))
loss_files = glob(join(base_dir, "losses_*.pkl"))

print(f"Found {len(run_files)} run files.")
print(f"Found {len(quant_files)} quant files.")
print(f"Found {len(loss_files)} loss files.")


def concatenate(files, what):
    df = []
    for k, file in enumerate(files):
        if k % 100 == 0:
            print(f"\tReading {what} file {k}.")
        try:
            df.append(pd.read_pickle(file))
        except Exception as e:
            print(f"\tError when reading file {file}: {e}")
    if not df:
        return pd.DataFrame()
    print("\tConcatenating.")
    return pd.concat(df, ignore_index=True, sort=False)


# RUNS
print("Aggregating run information.")
runs = concatenate(run_files, "run")
if not runs.empty:
    runs.to_pickle(join(base_dir, "run_results.pkl"))
    runs["recovery"] = runs["accuracy"] / runs["teacher_accuracy"]
    table = recovery_table(runs)
    recovery = runs.groupby(["sparsity", "pattern", "variant"], sort=True)["recovery"].mean()
    table = table.join(recovery, on=["sparsity", "pattern", "variant"])
    table.to_csv(join(base_dir, "recovery_table.csv"), index=False)
    print(table.to_string(index=False))
print("\tDone aggregating runs.\n")

# QUANT
print("Aggregating quantization information.")
quant = concatenate(quant_files, "quant")
if not quant.empty:
    quant.to_pickle(join(base_dir, "quant_results.pkl"))
print("\tDone aggregating quantization.\n")

# LOSSES
print("Aggregating loss curves.")
losses = concatenate(loss_files, "loss")
if not losses.empty:
    losses.to_pickle(join(base_dir, "loss_results.pkl"))
print("\tDone aggregating loss curves.\n")
