#!/usr/bin/env python
# coding: utf-8

"""
This script runs the sparse recovery sweep: a dense teacher is trained once, then pruned
copies are fine-tuned with each loss variant at each sparsity and seed.

Each call runs a single sweep and writes its frames to results/ under names tagged with the
config hash, so the script can be called with several configs (e.g. different seeds) and
aggregated later.
"""

import logging
import os
from sys import argv
from time import time

import pandas as pd

from sparsekit.config import load_config
from sparsekit.experiments import make_task, run_recovery_experiment, summarize_runs, train_teacher
from sparsekit.saving import compose_filename
from sparsekit.training import evaluate

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

start_time = time()

# Configuration
# ----------------------------------------------------
# An optional config file in the `key = value` format; the defaults otherwise.
config_path = argv[1] if len(argv) > 1 else None
config = load_config(config_path)
print(f"Running {len(config.sparsities) + len(config.nm_patterns)} sparsity configurations x "
      f"{len(config.variants)} variants x {len(config.seeds)} seeds.")

""" Generate data """
task = make_task(config.task_seed, config.vocab, config.seq, config.train_size, config.val_size,
                 config.test_size)

""" Train teacher """
teacher, teacher_run = train_teacher(config, task)
teacher_accuracy, teacher_entropy = evaluate(teacher, task.test)
print(f"Teacher test accuracy {teacher_accuracy:.4f}, entropy {teacher_entropy:.4f}")

""" Run sweep """
runs, quant, losses = run_recovery_experiment(teacher, task, config)
print(summarize_runs(runs, teacher_accuracy).to_string(index=False))
print(f"Time passed {time() - start_time:.1f}s")

# ----
# Saving
# ----------------------------------------------------
# Break down the output into different chunks, so it will be easier to pick what to load.
write_dir = os.path.join(os.getcwd(), "results")
os.makedirs(write_dir, exist_ok=True)
setting = dict(config_hash=config.config_hash()[:12], teacher_accuracy=teacher_accuracy)

runs.assign(**setting).to_pickle(os.path.join(write_dir, compose_filename("runs", "pkl", setting["config_hash"])))
quant.assign(**setting).to_pickle(os.path.join(write_dir, compose_filename("quant", "pkl", setting["config_hash"])))

curves = [frame.assign(run=name, **setting) for name, frame in losses.items()]
if curves:
    pd.concat(curves, ignore_index=True).to_pickle(
        os.path.join(write_dir, compose_filename("losses", "pkl", setting["config_hash"])))

print("All done.")
