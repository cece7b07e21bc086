"""
This script includes helper functions shared by the loss, training and quantization code.
"""

import numpy as np

__all__ = ["collect",
           "expand",
           "masked_mean",
           "running_median",
           "round_half_away",
           "row_scales",
           "quantize_to_scale"]


def collect(arr, idx):
    """
    Collect values of specific indices along the last axis. _collect_ and _expand_ are inverse function of each other.

    INPUT:
        - arr: array of shape [..., K]
        - idx: integer indices of shape [...]

    OUTPUT:
        - out: collected values of shape [...]
    """
    return np.take_along_axis(arr, idx[..., np.newaxis], axis=-1)[..., 0]


def expand(values, idx, num_cols):
    """
    Expand values to the specific indices in new array. _collect_ and _expand_ are inverse function of each other.

    INPUT:
        - values: array of shape [...]
        - idx: integer indices of shape [...]
        - num_cols: size K of the expanded last axis

    OUTPUT:
        - out: expanded values of shape [..., K], zero off the indices
    """
    values = np.asarray(values)
    out = np.zeros(idx.shape + (num_cols,), dtype=values.dtype)
    np.put_along_axis(out, idx[..., np.newaxis], np.broadcast_to(values, idx.shape)[..., np.newaxis], axis=-1)
    return out


def masked_mean(values, keep):
    """
    Mean of values at positions where keep is True, accumulated in float64.

    INPUT:
        - values: array of shape [B, seq]
        - keep: boolean array of shape [B, seq]

    OUTPUT:
        - mean as a python float
    """
    count = int(np.count_nonzero(keep))
    return float(np.sum(np.where(keep, values, 0.0), dtype=np.float64) / count)


def running_median(history, window):
    """
    Median of the `window` values preceding each step.

    INPUT:
        - history: losses of shape [T]
        - window: number of previous steps

    OUTPUT:
        - out: shape [T], nan for t < window
    """
    history = np.asarray(history, dtype=np.float64)
    out = np.full(len(history), np.nan)
    if len(history) > window:
        windows = np.lib.stride_tricks.sliding_window_view(history[:-1], window)
        out[window:] = np.median(windows, axis=1)
    return out


def round_half_away(x):
    """ Round to nearest integer, halves away from zero. Works elementwise. """
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def row_scales(W):
    """
    Symmetric INT8 scale per row: max|W[r, :]| / 127, zero for all-zero rows.
    Positive scales are floored at the smallest normal float32 so that rows of
    subnormal weights still satisfy |dequantized - w| <= scale / 2.

    INPUT:
        - W: float32 array of shape [rows, cols]

    OUTPUT:
        - scales: float32 array of shape [rows]
    """
    if W.shape[1] == 0:
        return np.zeros(W.shape[0], dtype=np.float32)
    peak = np.max(np.abs(W), axis=1).astype(np.float32)
    scales = np.maximum(peak / np.float32(127), np.finfo(np.float32).tiny)
    return np.where(peak > 0, scales, np.float32(0)).astype(np.float32)


def quantize_to_scale(values, scales):
    """
    q = clamp(round(values / scale), -127, 127), rounding halves away from zero.
    Entries with scale 0 (only possible for zero values) map to 0.

    INPUT:
        - values: float32 array
        - scales: float32 array broadcastable to values

    OUTPUT:
        - q: int8 array of the shape of values
    """
    safe = np.where(scales > 0, scales, np.float32(1))
    q = round_half_away(values / safe)
    q = np.where(scales > 0, q, 0)
    return np.clip(q, -127, 127).astype(np.int8)
