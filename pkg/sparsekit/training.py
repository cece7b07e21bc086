"""
SGD training loop with warmup and linear decay, divergence detection and evaluation.

A split is any object with integer `inputs` and `targets` and a boolean `padding`
array, all of shape [N, seq] (see experiments.Split).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from sparsekit.compute import running_median
from sparsekit.distill import LossVariant, TokenBatch, compute_losses, predictive_entropy
from sparsekit.errors import DomainError, MissingTeacherError
from sparsekit.model import backward, forward
from sparsekit.pruning import freeze_mask
from sparsekit.tensor import make_rng

__all__ = ["TrainRun",
           "DIVERGENCE_WINDOW",
           "DIVERGENCE_FACTOR",
           "SPIKE_FLOOR",
           "linear_schedule",
           "detect_divergence",
           "sgd_step",
           "train",
           "evaluate",
           "evaluate_splits"]

logger = logging.getLogger(__name__)

DIVERGENCE_WINDOW = 20
DIVERGENCE_FACTOR = 10.0
# losses below this (nats) never count as spikes
SPIKE_FLOOR = 0.1


@dataclass
class TrainRun:
    """
    History of one training run.

    steps holds one LossBreakdown row (step, variant, task, logit_kd, feat_total, total,
    entropy) per optimizer step taken; evals one row per epoch (epoch, accuracy, entropy)
    on the evaluation split.
    """
    variant: LossVariant
    seed: int
    sparsity: float = 0.0
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    diverged: bool = False
    diverged_step: Optional[int] = None

    @property
    def loss_history(self):
        return np.array([row["total"] for row in self.steps], dtype=np.float64)

    def steps_frame(self):
        return pd.DataFrame(self.steps, columns=["step", "variant", "task", "logit_kd", "feat_total",
                                                 "total", "entropy"])

    def summary(self):
        last = self.evals[-1] if self.evals else {}
        return dict(variant=self.variant.value, seed=self.seed, sparsity=self.sparsity,
                    steps=len(self.steps), diverged=self.diverged, diverged_step=self.diverged_step,
                    accuracy=last.get("accuracy", float("nan")), entropy=last.get("entropy", float("nan")))


def linear_schedule(step, total_steps, warmup_steps, peak):
    """
    Learning rate at a 0-based step: linear warmup to `peak` over warmup_steps, then
    linear decay to 0 at total_steps.
    """
    if step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    remaining = total_steps - warmup_steps
    if remaining <= 0:
        return peak
    return peak * max(0.0, (total_steps - step) / remaining)


def detect_divergence(history, window=DIVERGENCE_WINDOW, factor=DIVERGENCE_FACTOR, floor=SPIKE_FLOOR):
    """
    First step whose loss is non-finite, or exceeds both `factor` times the median of
    the `window` preceding losses and the absolute `floor`.

    INPUT:
        - history: per-step losses
        - floor: smallest loss (nats) that counts as a spike; 0 disables it

    OUTPUT:
        - (flag, step): step is None when nothing is flagged
    """
    history = np.asarray(history, dtype=np.float64)
    bad = ~np.isfinite(history)
    medians = running_median(np.where(bad, np.inf, history), window)
    with np.errstate(invalid="ignore"):
        spikes = (history > factor * medians) & (history > floor)
    flagged = np.flatnonzero(bad | spikes)
    if flagged.size == 0:
        return False, None
    return True, int(flagged[0])


def _last_step_diverged(history, window=DIVERGENCE_WINDOW, factor=DIVERGENCE_FACTOR):
    # earlier steps were already checked, so only the last step of the tail can be flagged
    tail = history[-window - 1:]
    flag, step = detect_divergence(tail, window, factor)
    return flag and step == len(tail) - 1


def sgd_step(model, grads, lr, weight_decay=0.0):
    """ In-place update W -= lr * (g + weight_decay * W); masked weights stay zero. """
    for name, g in grads.items():
        W = model.params[name]
        update = g + weight_decay * W if weight_decay else g
        if name in model.masks:
            update = freeze_mask(update, model.masks[name])
        W -= np.asarray(lr * update, dtype=W.dtype)


def _batch(split, idx):
    return TokenBatch(targets=split.targets[idx], padding=split.padding[idx], inputs=split.inputs[idx])


def train(model, task, variant, epochs, lr, seed, teacher=None, batch_size=32, warmup_steps=20,
          weight_decay=0.0, lam=1.0, temperature=1.0, eval_split=None, sparsity=0.0, feat_lam=None):
    """
    Fine-tune `model` in place with plain SGD.

    INPUT:
        - model: TinyModel (masks installed when sparse)
        - task: training split
        - variant: LossVariant or its name
        - epochs, lr: number of passes and peak learning rate
        - seed: seeds the per-epoch shuffles
        - teacher: TinyModel, required by the distillation variants; never modified
        - batch_size, warmup_steps, weight_decay, lam, temperature: optimizer and loss knobs
        - feat_lam: weight of the SquareHead feature term, lam when None
        - eval_split: evaluated after every epoch when given
        - sparsity: recorded on the run

    OUTPUT:
        - TrainRun; a non-finite loss or a loss spike halts training and marks the run
          diverged instead of raising
    """
    variant = LossVariant.parse(variant)
    if variant.needs_teacher and teacher is None:
        raise MissingTeacherError(f"variant {variant.value} needs a teacher model")
    if epochs < 0 or batch_size < 1:
        raise DomainError("epochs must be >= 0 and batch_size >= 1")
    n = len(task.inputs)
    if n == 0:
        raise DomainError("training split is empty")
    rng = make_rng(seed)
    steps_per_epoch = -(-n // batch_size)
    total_steps = epochs * steps_per_epoch
    run = TrainRun(variant=variant, seed=seed, sparsity=sparsity)
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = _batch(task, order[start:start + batch_size])
            logits, features, trace = forward(model, batch.inputs, keep_trace=True)
            if not np.all(np.isfinite(logits)):
                run.steps.append(dict(step=step, variant=variant.value, task=float("nan"),
                                      logit_kd=float("nan"), feat_total=float("nan"),
                                      total=float("nan"), entropy=float("nan")))
                history.append(float("nan"))
            else:
                teacher_logits = teacher_features = None
                if teacher is not None and variant.needs_teacher:
                    teacher_logits, teacher_features = forward(teacher, batch.inputs)
                breakdown = compute_losses(variant, logits, features, batch,
                                           teacher_logits=teacher_logits, teacher_features=teacher_features,
                                           lam=lam, temperature=temperature, feat_lam=feat_lam)
                run.steps.append(breakdown.as_row(step, predictive_entropy(logits, batch)))
                history.append(breakdown.total)
            if _last_step_diverged(history):
                run.diverged, run.diverged_step = True, step
                logger.warning("%s run (seed %d, sparsity %.2f) diverged at step %d, loss %s",
                               variant.value, seed, sparsity, step, history[-1])
                return run
            sgd_step(model, backward(model, trace, breakdown),
                     linear_schedule(step, total_steps, warmup_steps, lr), weight_decay)
            step += 1
        if eval_split is not None:
            accuracy, entropy = evaluate(model, eval_split)
            run.evals.append(dict(epoch=epoch, accuracy=accuracy, entropy=entropy))
            logger.info("%s epoch %d: loss %.4f, accuracy %.4f, entropy %.4f",
                        variant.value, epoch, history[-1], accuracy, entropy)
    return run


def evaluate(model, split, batch_size=256):
    """
    Accuracy over non-padding tokens (argmax logit == target) and the mean predictive
    entropy in nats, weighted by tokens.
    """
    n = len(split.inputs)
    if n == 0:
        raise DomainError("evaluation split is empty")
    correct = tokens = 0
    entropy_sum = 0.0
    for start in range(0, n, batch_size):
        batch = _batch(split, slice(start, start + batch_size))
        logits, _ = forward(model, batch.inputs)
        keep = batch.keep
        count = int(np.count_nonzero(keep))
        if count == 0:
            continue
        correct += int(np.count_nonzero((np.argmax(logits, axis=-1) == batch.targets) & keep))
        entropy_sum += predictive_entropy(logits, batch) * count
        tokens += count
    if tokens == 0:
        raise DomainError("evaluation split has no non-padding tokens")
    return correct / tokens, entropy_sum / tokens


def evaluate_splits(model, splits):
    """ evaluate on every named split: {name: {"accuracy": ..., "entropy": ...}}. """
    out = {}
    for name, split in splits.items():
        accuracy, entropy = evaluate(model, split)
        out[name] = dict(accuracy=accuracy, entropy=entropy)
    return out
