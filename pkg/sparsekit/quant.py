"""
Symmetric per-row INT8 post-training quantization of weights, applied after pruning.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from sparsekit.compute import quantize_to_scale, row_scales
from sparsekit.errors import ShapeError
from sparsekit.formats import compress
from sparsekit.tensor import as_matrix
from sparsekit.training import evaluate

__all__ = ["QuantizedMatrix",
           "QuantEval",
           "quantize_int8",
           "dequantize",
           "sparse_quant_compress",
           "quantize_model",
           "quantized_eval"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """ int8 values q of shape [rows, cols] with one float32 scale per row. """
    q: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        q = np.ascontiguousarray(self.q, dtype=np.int8)
        scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        if q.ndim != 2 or scales.shape != (q.shape[0],):
            raise ShapeError(f"int8 values {q.shape} need one scale per row, got {scales.shape}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "scales", scales)

    @property
    def rows(self):
        return self.q.shape[0]

    @property
    def cols(self):
        return self.q.shape[1]


def quantize_int8(W):
    """
    scale_r = max|W[r, :]| / 127, q = clamp(round(w / scale_r), -127, 127) with halves
    rounded away from zero; exact zeros stay 0, all-zero rows get scale 0 and other
    scales never drop below the smallest normal float32.
    """
    W = as_matrix(W)
    scales = row_scales(W)
    return QuantizedMatrix(quantize_to_scale(W, scales[:, np.newaxis]), scales)


def dequantize(qm):
    return qm.q.astype(np.float32) * qm.scales[:, np.newaxis]


def sparse_quant_compress(W):
    """
    Bitmask-compress an already pruned matrix with an int8 payload: the mask comes from
    the exact zeros of W, the surviving values are quantized per row.
    """
    return compress(W, "int8")


def quantize_model(model):
    """ Copy of the model whose linear weights went through quantize -> dequantize. """
    quantized = model.copy()
    for name in model.linear_names():
        W = model.params[name]
        quantized.params[name] = dequantize(quantize_int8(W)).astype(W.dtype, copy=False)
    return quantized


class QuantEval(NamedTuple):
    fp32_accuracy: float
    int8_accuracy: float
    delta: float


def quantized_eval(model, split):
    """
    Simulated INT8 inference: accuracy of the model as is and with every linear weight
    quantized, on the same split. delta = int8_accuracy - fp32_accuracy.
    """
    fp32_accuracy, _ = evaluate(model, split)
    int8_accuracy, _ = evaluate(quantize_model(model), split)
    logger.info("fp32 accuracy %.4f, int8 accuracy %.4f", fp32_accuracy, int8_accuracy)
    return QuantEval(fp32_accuracy, int8_accuracy, int8_accuracy - fp32_accuracy)
