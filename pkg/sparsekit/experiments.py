"""
This script includes the synthetic task (data generating process), teacher training and
the sparse recovery experiment: copy teacher -> prune -> fine-tune with a loss variant
-> record accuracy, entropy and divergence.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from sparsekit.distill import LossVariant
from sparsekit.errors import DomainError, SparseKitError
from sparsekit.formats import NMPattern
from sparsekit.model import TinyModel, TinyModelConfig, previous_tokens
from sparsekit.pruning import MagnitudePruner, NMPruner, SparsitySchedule, run_schedule
from sparsekit.quant import quantized_eval
from sparsekit.tensor import make_rng
from sparsekit.training import evaluate, train

__all__ = ["Split",
           "SyntheticTask",
           "make_split",
           "make_task",
           "model_config",
           "train_teacher",
           "recovery_schedule",
           "run_recovery_experiment",
           "summarize_runs",
           "RUN_COLUMNS"]

logger = logging.getLogger(__name__)

RUN_COLUMNS = ["sparsity", "variant", "seed", "accuracy", "entropy", "diverged",
               "train_entropy", "diverged_step", "pattern", "error"]


@dataclass(frozen=True, eq=False)
class Split:
    """ Token ids, targets and padding flags, each of shape [N, seq]. """
    inputs: np.ndarray
    targets: np.ndarray
    padding: np.ndarray

    def __len__(self):
        return len(self.inputs)

    def head(self, n):
        return Split(self.inputs[:n], self.targets[:n], self.padding[:n])


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    """
    Per-position classification y_i = (x_i + x_{i-1}) mod V with x_{-1} := 0 and random
    length padding tails.
    """
    seed: int
    vocab: int
    seq: int
    train: Split
    val: Split
    test: Split

    def splits(self):
        return dict(train=self.train, val=self.val, test=self.test)


def make_split(rng, n, vocab, seq, min_length=None):
    """
    Draw n sequences with lengths uniform in [min_length, seq] (default seq // 2); padded
    positions carry token 0 and are flagged in `padding`.
    """
    min_length = max(1, seq // 2) if min_length is None else min_length
    if not 1 <= min_length <= seq:
        raise DomainError(f"min_length must lie in [1, {seq}], got {min_length}")
    lengths = rng.integers(min_length, seq + 1, size=n)
    inputs = rng.integers(0, vocab, size=(n, seq))
    padding = np.arange(seq)[np.newaxis, :] >= lengths[:, np.newaxis]
    inputs[padding] = 0
    targets = (inputs + previous_tokens(inputs)) % vocab
    targets[padding] = 0
    return Split(inputs.astype(np.int64), targets.astype(np.int64), padding)


def make_task(seed, vocab=32, seq=16, train_size=4096, val_size=512, test_size=512):
    if min(train_size, val_size, test_size) < 1:
        raise DomainError("split sizes must be positive")
    rng = make_rng(seed)
    return SyntheticTask(seed=seed, vocab=vocab, seq=seq,
                         train=make_split(rng, train_size, vocab, seq),
                         val=make_split(rng, val_size, vocab, seq),
                         test=make_split(rng, test_size, vocab, seq))


def model_config(config):
    return TinyModelConfig(vocab=config.vocab, d_model=config.d_model, blocks=config.blocks, seq=config.seq,
                           prune_embeddings=config.prune_embeddings, prune_head=config.prune_head)


def train_teacher(config, task):
    """
    Train the dense teacher on the full train split with the CE loss.

    OUTPUT:
        - teacher: TinyModel
        - run: TrainRun with per-epoch validation accuracy
    """
    teacher = TinyModel.init(model_config(config), seed=config.task_seed)
    run = train(teacher, task.train, LossVariant.CE, epochs=config.teacher_epochs, lr=config.teacher_lr,
                seed=config.task_seed, batch_size=config.batch_size, warmup_steps=config.warmup_steps,
                weight_decay=config.weight_decay, eval_split=task.val)
    if run.diverged:
        raise SparseKitError(f"teacher training diverged at step {run.diverged_step}")
    accuracy, _ = evaluate(teacher, task.val)
    logger.info("teacher validation accuracy %.4f", accuracy)
    return teacher, run


def recovery_schedule(config, sparsity):
    """ One-shot schedule, or the configured gradual levels below the target followed by it. """
    epochs = config.epochs
    if config.schedule == "gradual":
        levels = [s for s in config.sparsity_levels if s < sparsity] + [sparsity]
        return SparsitySchedule.gradual(levels, max(1, epochs // len(levels)), restart_lr=config.restart_lr)
    if config.schedule != "oneshot":
        raise DomainError(f"unknown schedule {config.schedule!r}; use 'oneshot' or 'gradual'")
    return SparsitySchedule.oneshot(sparsity, epochs, restart_lr=config.restart_lr)


def _student_run(teacher, task, config, sparsity, variant, seed, pattern=None):
    """ Prune a copy of the teacher and fine-tune it; returns (row, TrainRun list, student). """
    finetune_split = task.train.head(config.finetune_size) if config.finetune_size else task.train
    student = teacher.copy()
    runs = []

    def finetune(model, level, epochs, restart_lr):
        # without a restart only the first level warms up
        warmup = config.warmup_steps if restart_lr or not runs else 0
        run = train(model, finetune_split, variant, epochs=epochs, lr=config.lr, seed=seed + len(runs),
                    teacher=teacher, batch_size=config.batch_size, warmup_steps=warmup,
                    weight_decay=config.weight_decay, lam=config.lam, temperature=config.temperature,
                    eval_split=task.val, sparsity=level, feat_lam=config.feat_lam)
        runs.append(run)
        return run.summary()

    if pattern is not None:
        schedule = SparsitySchedule.oneshot(pattern.sparsity, config.epochs, restart_lr=config.restart_lr)
        run_schedule(student, schedule, NMPruner(pattern), finetune)
    elif sparsity > 0:
        run_schedule(student, recovery_schedule(config, sparsity), MagnitudePruner(), finetune)
    else:
        finetune(student, 0.0, config.epochs, True)

    diverged = any(run.diverged for run in runs)
    diverged_step = next((run.diverged_step for run in runs if run.diverged), None)
    if all(np.all(np.isfinite(p)) for p in student.params.values()):
        accuracy, entropy = evaluate(student, task.test)
        _, train_entropy = evaluate(student, finetune_split)
    else:
        accuracy = entropy = train_entropy = np.nan
    row = dict(sparsity=sparsity, variant=variant.value, seed=seed, accuracy=accuracy, entropy=entropy,
               diverged=diverged, train_entropy=train_entropy, diverged_step=diverged_step,
               pattern=str(pattern) if pattern else "", error="")
    return row, runs, student


def run_recovery_experiment(teacher, task, config, sparsities=None, variants=None, seeds=None,
                            nm_patterns=None):
    """
    Sweep (sparsity or N:M pattern) x variant x seed.

    INPUT:
        - teacher: trained dense TinyModel; only copies of it are modified
        - task: SyntheticTask
        - config: ExperimentConfig
        - sparsities, variants, seeds, nm_patterns: override the config lists

    OUTPUT:
        - runs: DataFrame with RUN_COLUMNS, one row per configuration; failed runs carry
          the error message and NaN metrics
        - quant: DataFrame (sparsity, variant, seed, pattern, fp32_accuracy, int8_accuracy,
          delta) of simulated INT8 inference on the test split
        - losses: dict run name -> DataFrame of per-step loss rows
    """
    sparsities = config.sparsities if sparsities is None else sparsities
    variants = [LossVariant.parse(v) for v in (config.variants if variants is None else variants)]
    seeds = config.seeds if seeds is None else seeds
    patterns = [NMPattern.parse(p) if isinstance(p, str) else p
                for p in (config.nm_patterns if nm_patterns is None else nm_patterns)]
    configurations = [(s, None) for s in sparsities] + [(p.sparsity, p) for p in patterns]

    # -------------------------------------------------------
    # sweep
    rows, quant_rows, losses = [], [], {}
    for sparsity, pattern in configurations:
        for variant in variants:
            for seed in seeds:
                label = f"{pattern or f'{sparsity:.2f}'}-{variant.value}-seed{seed}"
                logger.info("running %s", label)
                try:
                    row, runs, student = _student_run(teacher, task, config, sparsity, variant, seed, pattern)
                except SparseKitError as exc:
                    logger.warning("run %s failed: %s", label, exc)
                    rows.append(dict(sparsity=sparsity, variant=variant.value, seed=seed, accuracy=np.nan,
                                     entropy=np.nan, diverged=False, train_entropy=np.nan, diverged_step=None,
                                     pattern=str(pattern) if pattern else "", error=str(exc)))
                    continue
                rows.append(row)
                losses[label.replace(":", "of")] = pd.concat([run.steps_frame() for run in runs],
                                                             ignore_index=True)
                if np.isnan(row["accuracy"]):
                    continue
                q = quantized_eval(student, task.test)
                quant_rows.append(dict(sparsity=sparsity, variant=variant.value, seed=seed, pattern=row["pattern"],
                                       fp32_accuracy=q.fp32_accuracy, int8_accuracy=q.int8_accuracy, delta=q.delta))

    # -------------------------------------------------------
    # tabulate
    runs_frame = pd.DataFrame(rows, columns=RUN_COLUMNS)
    quant_frame = pd.DataFrame(quant_rows, columns=["sparsity", "variant", "seed", "pattern",
                                                    "fp32_accuracy", "int8_accuracy", "delta"])
    return runs_frame, quant_frame, losses


def summarize_runs(runs: pd.DataFrame, teacher_accuracy: Optional[float] = None):
    """ Mean and std over seeds per (sparsity, pattern, variant). """
    table = runs.groupby(["sparsity", "pattern", "variant"], sort=True).agg(
        accuracy=("accuracy", "mean"), accuracy_std=("accuracy", "std"),
        entropy=("entropy", "mean"), train_entropy=("train_entropy", "mean"),
        diverged=("diverged", "sum"), seeds=("seed", "count")).reset_index()
    if teacher_accuracy is not None:
        table["recovery"] = table["accuracy"] / teacher_accuracy
    return table
