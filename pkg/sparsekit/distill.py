"""
This script contains the loss zoo for sparse fine-tuning: masked cross-entropy, logit
distillation (token-averaged KL), SquareHead normalized feature MSE, their
combinations and the predictive entropy. Every loss returns its value together with
the hand-derived gradient with respect to the student outputs.

Shapes follow the notation B (batch), seq (sequence length), V (vocabulary) and
d (model width). Teacher outputs are constants.
"""

import enum
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import special

from sparsekit.compute import collect, expand, masked_mean
from sparsekit.errors import DegenerateTeacherError, DomainError, MissingTeacherError, ShapeError

__all__ = ["TokenBatch",
           "LossVariant",
           "LossBreakdown",
           "task_loss",
           "logit_kd_loss",
           "squarehead_layer_loss",
           "squarehead_total",
           "combined_loss",
           "compute_losses",
           "predictive_entropy",
           "DENOMINATOR_EPS"]

DENOMINATOR_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class TokenBatch:
    """
    Targets and padding of one batch.

    Fields:
        - targets: integer token ids of shape [B, seq]
        - padding: boolean array of shape [B, seq], True at padding positions P
        - inputs: optional integer input ids of shape [B, seq] (model batches only)
    """
    targets: np.ndarray
    padding: np.ndarray
    inputs: Optional[np.ndarray] = None

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=np.int64)
        padding = np.asarray(self.padding, dtype=bool)
        if targets.ndim != 2 or padding.shape != targets.shape:
            raise ShapeError(f"targets {targets.shape} and padding {padding.shape} must share a [B, seq] shape")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "padding", padding)
        if self.inputs is not None:
            inputs = np.asarray(self.inputs, dtype=np.int64)
            if inputs.shape != targets.shape:
                raise ShapeError(f"inputs {inputs.shape} do not match targets {targets.shape}")
            object.__setattr__(self, "inputs", inputs)

    @property
    def shape(self):
        return self.targets.shape

    @property
    def keep(self):
        return ~self.padding

    @property
    def count(self):
        """ Number of non-padding tokens; an all-padding batch has no loss. """
        n = int(np.count_nonzero(~self.padding))
        if n == 0:
            raise DomainError("every token of the batch is padding")
        return n


class LossVariant(str, enum.Enum):
    CE = "ce"
    KD = "kd"
    SQUAREHEAD = "squarehead"
    SQUAREHEAD_KD = "squarehead_kd"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        aliases = {"ce": cls.CE, "crossentropy": cls.CE,
                   "kd": cls.KD, "standardkd": cls.KD,
                   "squarehead": cls.SQUAREHEAD, "squareheadkd": cls.SQUAREHEAD,
                   "squarehead_kd": cls.SQUAREHEAD_KD, "all": cls.SQUAREHEAD_KD}
        key = str(text).strip().lower().replace("-", "").replace(" ", "")
        if key not in aliases:
            raise DomainError(f"unknown loss variant {text!r}; use one of {[v.value for v in cls]}")
        return aliases[key]

    @property
    def uses_logit(self):
        return self in (LossVariant.KD, LossVariant.SQUAREHEAD_KD)

    @property
    def uses_features(self):
        return self in (LossVariant.SQUAREHEAD, LossVariant.SQUAREHEAD_KD)

    @property
    def needs_teacher(self):
        return self.uses_logit or self.uses_features


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    """
    Scalar losses of one batch and the gradient of `total` with respect to the
    student logits ([B, seq, V]) and to each student feature map ([B, seq, d]; None
    for maps that do not enter the loss).
    """
    variant: LossVariant
    task: float
    logit_kd: float
    feat_per_layer: Tuple[float, ...]
    feat_total: float
    total: float
    grad_logits: np.ndarray
    grad_features: Tuple[Optional[np.ndarray], ...] = ()

    def as_row(self, step, entropy=float("nan")):
        return dict(step=step, variant=self.variant.value, task=self.task, logit_kd=self.logit_kd,
                    feat_total=self.feat_total, total=self.total, entropy=entropy)


def _check_logits(logits, batch, name):
    logits = np.asarray(logits)
    if logits.ndim != 3 or logits.shape[:2] != batch.shape:
        raise ShapeError(f"{name} of shape {logits.shape} do not match batch shape {batch.shape}")
    if not np.all(np.isfinite(logits)):
        raise DomainError(f"{name} contain non-finite values")
    return logits


def task_loss(student_logits, batch):
    """
    Mean negative log-likelihood of the targets over non-padding tokens.

    INPUT:
        - student_logits: array of shape [B, seq, V]
        - batch: TokenBatch

    OUTPUT:
        - loss: python float
        - grad: (softmax - onehot) / count at non-padding tokens, 0 at padding, shape [B, seq, V]
    """
    logits = _check_logits(student_logits, batch, "student logits")
    V = logits.shape[-1]
    count = batch.count
    keep = batch.keep
    if np.any(batch.targets[keep] >= V) or np.any(batch.targets[keep] < 0):
        raise DomainError(f"target ids must lie in [0, {V})")
    targets = np.where(keep, batch.targets, 0)
    logp = special.log_softmax(logits, axis=-1)
    loss = masked_mean(-collect(logp, targets), keep)
    onehot = expand(np.ones((), dtype=logits.dtype), targets, V)
    grad = (np.exp(logp) - onehot) * (keep[..., np.newaxis] / count)
    return loss, grad.astype(logits.dtype, copy=False)


def logit_kd_loss(teacher_logits, student_logits, batch, temperature=1.0):
    """
    Token-averaged KL(p_teacher || p_student) over non-padding tokens.

    INPUT:
        - teacher_logits, student_logits: arrays of identical shape [B, seq, V]
        - batch: TokenBatch
        - temperature: softening applied to both logits; 1 reproduces the plain KL

    OUTPUT:
        - loss: python float, >= 0
        - grad: (p_student - p_teacher) / (count * temperature) at non-padding tokens
    """
    teacher_logits = _check_logits(teacher_logits, batch, "teacher logits")
    student_logits = _check_logits(student_logits, batch, "student logits")
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"teacher {teacher_logits.shape} and student {student_logits.shape} logits differ in shape")
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    count = batch.count
    keep = batch.keep
    log_pt = special.log_softmax(teacher_logits / temperature, axis=-1)
    log_ps = special.log_softmax(student_logits / temperature, axis=-1)
    p_t = np.exp(log_pt)
    kl = np.sum(p_t * (log_pt - log_ps), axis=-1)
    loss = masked_mean(kl, keep)
    grad = (np.exp(log_ps) - p_t) * (keep[..., np.newaxis] / (count * temperature))
    return loss, grad.astype(student_logits.dtype, copy=False)


def squarehead_layer_loss(f_t, f_s, batch):
    """
    Normalized feature MSE of one block: MSE(f_t, f_s) / MSE(f_t, 0), both means taken
    over the non-padding positions only.

    INPUT:
        - f_t, f_s: teacher and student feature maps of shape [B, seq, d]
        - batch: TokenBatch

    OUTPUT:
        - loss: python float
        - grad: 2 (f_s - f_t) / (N * MSE(f_t, 0)) at non-padding positions, N = count * d
    """
    f_t = np.asarray(f_t)
    f_s = np.asarray(f_s)
    if f_t.shape != f_s.shape or f_t.ndim != 3 or f_t.shape[:2] != batch.shape:
        raise ShapeError(f"feature maps {f_t.shape} / {f_s.shape} do not match batch shape {batch.shape}")
    keep = batch.keep[..., np.newaxis]
    n = batch.count * f_t.shape[-1]
    diff = np.where(keep, f_s.astype(np.float64) - f_t, 0.0)
    teacher = np.where(keep, f_t.astype(np.float64), 0.0)
    numerator = np.sum(diff * diff) / n
    denominator = np.sum(teacher * teacher) / n
    if not np.isfinite(denominator) or denominator < DENOMINATOR_EPS:
        raise DegenerateTeacherError(
            f"teacher feature MSE against zero is {denominator:.3g} over non-padding tokens")
    grad = 2.0 * diff / (n * denominator)
    return float(numerator / denominator), grad.astype(f_s.dtype, copy=False)


def squarehead_total(per_layer):
    """ Plain sum of per-block SquareHead losses. """
    per_layer = list(per_layer)
    if not per_layer:
        raise DomainError("SquareHead total needs at least one layer")
    return math.fsum(per_layer)


def combined_loss(variant, task, logit=None, feat=None, lam=1.0, feat_lam=None):
    """
    Assemble a LossBreakdown from the component losses required by a variant.

    INPUT:
        - variant: LossVariant (or its name)
        - task: (loss, grad_logits) from task_loss
        - logit: (loss, grad_logits) from logit_kd_loss, required by kd / squarehead_kd
        - feat: list of (loss, grad_features), one per block, required by squarehead*
        - lam: weight of the logit distillation term
        - feat_lam: weight of the feature term (defaults to lam)

    OUTPUT:
        - LossBreakdown; ce -> L_task, kd -> L_task + lam L_logit,
          squarehead -> L_task + feat_lam L_feat, squarehead_kd -> all three
    """
    variant = LossVariant.parse(variant)
    if feat_lam is None:
        feat_lam = lam
    task_value, grad_logits = task
    total = task_value
    logit_value = float("nan")
    feat_values = ()
    feat_total = float("nan")
    grad_features = ()
    if variant.uses_logit:
        if logit is None:
            raise MissingTeacherError(f"variant {variant.value} needs the logit distillation term")
        logit_value, logit_grad = logit
        total = total + lam * logit_value
        grad_logits = grad_logits + lam * logit_grad
    if variant.uses_features:
        if not feat:
            raise MissingTeacherError(f"variant {variant.value} needs per-layer feature losses")
        feat_values = tuple(value for value, _ in feat)
        feat_total = squarehead_total(feat_values)
        total = total + feat_lam * feat_total
        grad_features = tuple(feat_lam * grad for _, grad in feat)
    return LossBreakdown(variant=variant, task=task_value, logit_kd=logit_value,
                         feat_per_layer=feat_values, feat_total=feat_total, total=total,
                         grad_logits=grad_logits, grad_features=grad_features)


def compute_losses(variant, student_logits, student_features, batch,
                   teacher_logits=None, teacher_features=None, lam=1.0, temperature=1.0, feat_lam=None):
    """
    Evaluate every component a variant needs and combine them.

    INPUT:
        - student_logits: [B, seq, V]; student_features: list of [B, seq, d], one per block
        - teacher_logits / teacher_features: same shapes, required by distillation variants
    """
    variant = LossVariant.parse(variant)
    if variant.uses_logit and teacher_logits is None:
        raise MissingTeacherError(f"variant {variant.value} needs teacher logits")
    if variant.uses_features and teacher_features is None:
        raise MissingTeacherError(f"variant {variant.value} needs teacher feature maps")
    task = task_loss(student_logits, batch)
    logit = feat = None
    if variant.uses_logit:
        logit = logit_kd_loss(teacher_logits, student_logits, batch, temperature=temperature)
    if variant.uses_features:
        if len(teacher_features) != len(student_features):
            raise ShapeError(f"{len(teacher_features)} teacher maps for {len(student_features)} student maps")
        feat = [squarehead_layer_loss(f_t, f_s, batch)
                for f_t, f_s in zip(teacher_features, student_features)]
    return combined_loss(variant, task, logit=logit, feat=feat, lam=lam, feat_lam=feat_lam)


def predictive_entropy(student_logits, batch):
    """
    Mean Shannon entropy (nats) of the per-token output distribution over
    non-padding tokens.
    """
    logits = _check_logits(student_logits, batch, "student logits")
    if batch.count < 1:
        raise DomainError("entropy of an empty batch")
    logp = special.log_softmax(logits, axis=-1)
    entropy = special.entr(np.exp(logp)).sum(axis=-1)
    return masked_mean(entropy, batch.keep)
