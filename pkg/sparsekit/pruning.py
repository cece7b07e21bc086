"""
Per-layer magnitude pruning, N:M block projection, gradient masking and the
gradual prune-then-fine-tune schedule.

A pruned weight is stored as exactly 0.0; masks record which positions survive.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Protocol, Tuple

import numpy as np

from sparsekit.compute import round_half_away
from sparsekit.errors import DomainError, PruningError, ShapeError
from sparsekit.formats import NMPattern

__all__ = ["PruneMask",
           "SparsitySchedule",
           "Pruner",
           "MagnitudePruner",
           "NMPruner",
           "magnitude_prune",
           "nm_project",
           "freeze_mask",
           "run_schedule"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PruneMask:
    """ One keep (True) / drop (False) bit per weight. """
    keep: np.ndarray

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        if keep.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {keep.shape}")
        object.__setattr__(self, "keep", keep)

    @classmethod
    def full(cls, shape):
        return cls(np.ones(shape, dtype=bool))

    @property
    def shape(self):
        return self.keep.shape

    @property
    def density(self):
        return float(np.count_nonzero(self.keep)) / self.keep.size if self.keep.size else 0.0

    def apply(self, W):
        return np.where(self.keep, W, np.zeros((), dtype=W.dtype))


@dataclass(frozen=True)
class SparsitySchedule:
    """
    Increasing target sparsities; each level is followed by fine-tuning with masks frozen.

    restart_lr: whether every level restarts the learning-rate schedule (warmup + decay).
    """
    levels: Tuple[float, ...] = ()
    finetune_epochs_per_level: int = 1
    restart_lr: bool = True

    def __post_init__(self):
        levels = tuple(float(s) for s in self.levels)
        if any(not 0.0 < s <= 1.0 for s in levels):
            raise DomainError(f"sparsity levels must lie in (0, 1], got {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise DomainError(f"sparsity levels must be strictly increasing, got {levels}")
        if self.finetune_epochs_per_level < 0:
            raise DomainError("finetune_epochs_per_level must be nonnegative")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def oneshot(cls, level, epochs, restart_lr=True):
        return cls((level,), epochs, restart_lr)

    @classmethod
    def gradual(cls, levels, epochs_per_level, restart_lr=True):
        return cls(tuple(levels), epochs_per_level, restart_lr)


def _as_2d(W):
    W = np.asarray(W)
    if W.ndim != 2:
        raise ShapeError(f"weight must be 2-D, got shape {W.shape}")
    return W


def magnitude_prune(W, sparsity):
    """
    Zero the k = round(sparsity * size) smallest-magnitude entries of one layer.

    INPUT:
        - W: weight matrix of shape [rows, cols]
        - sparsity: target fraction of zeros in [0, 1]

    OUTPUT:
        - W': pruned copy of W (survivors unchanged)
        - mask: PruneMask of survivors

    Ties in |w| are broken by row-major index, earlier entries pruned first.
    """
    W = _as_2d(W)
    if not 0.0 <= sparsity <= 1.0:
        raise DomainError(f"sparsity must lie in [0, 1], got {sparsity}")
    k = int(round_half_away(sparsity * W.size))
    keep = np.ones(W.size, dtype=bool)
    if k:
        order = np.argsort(np.abs(W).ravel(), kind="stable")
        keep[order[:k]] = False
    mask = PruneMask(keep.reshape(W.shape))
    return mask.apply(W), mask


def nm_project(W, pattern):
    """
    Keep the n largest-magnitude entries of every length-m block along each row.

    INPUT:
        - W: weight matrix of shape [rows, cols], m must divide cols
        - pattern: NMPattern

    OUTPUT:
        - W': projected copy of W
        - mask: PruneMask of survivors

    Ties keep the lower index.
    """
    W = _as_2d(W)
    rows, cols = W.shape
    if cols % pattern.m:
        raise ShapeError(f"block length {pattern.m} does not divide row length {cols}")
    blocks = np.abs(W).reshape(rows, cols // pattern.m, pattern.m)
    order = np.argsort(-blocks, axis=2, kind="stable")
    keep = np.zeros(blocks.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :pattern.n], True, axis=2)
    mask = PruneMask(keep.reshape(rows, cols))
    return mask.apply(W), mask


def freeze_mask(grad, mask):
    """ Zero the gradient at dropped positions so pruned weights stay exactly 0.0. """
    grad = np.asarray(grad)
    if grad.shape != mask.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match mask shape {mask.shape}")
    return mask.apply(grad)


class Pruner(Protocol):
    def __call__(self, W: np.ndarray, level: float) -> Tuple[np.ndarray, PruneMask]:
        ...


class MagnitudePruner:
    """ Default pruner: per-layer unstructured magnitude pruning to the level. """

    def __call__(self, W, level):
        return magnitude_prune(W, level)

    def __repr__(self):
        return "MagnitudePruner()"


class NMPruner:
    """ Projects every layer to a fixed N:M pattern; the level only labels the phase. """

    def __init__(self, pattern):
        self.pattern = NMPattern.parse(pattern) if isinstance(pattern, str) else pattern

    def __call__(self, W, level):
        return nm_project(W, self.pattern)

    def __repr__(self):
        return f"NMPruner({self.pattern})"


def run_schedule(model, schedule, pruner=None, finetune: Callable = None):
    """
    Iteratively prune and fine-tune.

    INPUT:
        - model: object exposing prunable() -> {name: weight} and install(name, weight, mask)
        - schedule: SparsitySchedule
        - pruner: callable (W, level) -> (W', mask); magnitude pruning by default
        - finetune: callable (model, level, epochs, restart_lr) -> result, run after each
          level with masks installed; None skips fine-tuning

    OUTPUT:
        - model: the same object, pruned to the last level
        - history: one dict per level with level, measured sparsity per layer and the
          fine-tuning result
    """
    pruner = MagnitudePruner() if pruner is None else pruner
    history = []
    for level in schedule.levels:
        logger.info("pruning to sparsity %.4f with %r", level, pruner)
        try:
            for name, W in model.prunable().items():
                pruned, mask = pruner(W, level)
                model.install(name, pruned, mask)
            result = None
            if finetune is not None:
                result = finetune(model, level, schedule.finetune_epochs_per_level, schedule.restart_lr)
        except Exception as exc:
            raise PruningError(level, exc) from exc
        layer_sparsity = {name: 1.0 - np.count_nonzero(W) / W.size for name, W in model.prunable().items()}
        history.append(dict(level=level, layer_sparsity=layer_sparsity, result=result))
        logger.info("finished level %.4f, measured sparsity %s", level,
                    ", ".join(f"{k}={v:.4f}" for k, v in layer_sparsity.items()))
    return model, history
