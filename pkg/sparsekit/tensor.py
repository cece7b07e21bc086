"""
Dense FP32 substrate: validation, seeded generation, softmax, the dense matvec
baselines and the SKDM matrix container.

DenseMatrix and Vector are C-contiguous float32 numpy arrays of rank 2 and 1.
"""

import logging
import struct

import numba
import numpy as np
from scipy import special

from sparsekit.errors import CorruptFormatError, DomainError, ShapeError

__all__ = ["as_matrix",
           "as_vector",
           "make_rng",
           "random_matrix",
           "random_vector",
           "softmax",
           "dense_matvec",
           "dense_matvec_parallel",
           "dense_matmul",
           "save_matrix",
           "load_matrix",
           "MATRIX_MAGIC"]

logger = logging.getLogger(__name__)

MATRIX_MAGIC = b"SKDM"
_HEADER = struct.Struct("<4sII")


def as_matrix(W, name="W"):
    """
    Validate and convert to a DenseMatrix (C-contiguous float32, rank 2, finite).
    """
    W = np.ascontiguousarray(W, dtype=np.float32)
    if W.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise DomainError(f"{name} contains non-finite values")
    return W


def as_vector(x, name="x"):
    """
    Validate and convert to a Vector (C-contiguous float32, rank 1, finite).
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} contains non-finite values")
    return x


def make_rng(seed):
    """
    Seeded generator. PCG64 produces the same stream for a seed on every platform.
    """
    return np.random.Generator(np.random.PCG64(seed))


def random_matrix(rows, cols, rng, dist="gaussian", scale=1.0):
    """
    Draw a DenseMatrix with i.i.d. entries.

    INPUT:
        - rows, cols: positive dimensions
        - rng: numpy Generator (see make_rng)
        - dist: "gaussian" for N(0, scale^2) or "uniform" for U(-scale, scale)
        - scale: sigma or half-width a

    OUTPUT:
        - float32 array of shape [rows, cols]
    """
    if rows < 1 or cols < 1:
        raise DomainError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if dist == "gaussian":
        W = rng.standard_normal((rows, cols), dtype=np.float32) * np.float32(scale)
    elif dist == "uniform":
        u = rng.random((rows, cols), dtype=np.float32)
        W = (np.float32(2 * scale) * u - np.float32(scale)).clip(-scale, scale)
    else:
        raise DomainError(f"unknown distribution {dist!r}; use 'gaussian' or 'uniform'")
    return np.ascontiguousarray(W, dtype=np.float32)


def random_vector(n, rng, dist="gaussian", scale=1.0):
    return random_matrix(1, n, rng, dist=dist, scale=scale)[0].copy()


def softmax(logits, axis=-1):
    """
    Numerically stable softmax, exp(l - max) / sum exp(l - max), along `axis`.
    """
    logits = np.asarray(logits)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DomainError("softmax of an empty input")
    if not np.all(np.isfinite(logits)):
        raise DomainError("softmax input contains non-finite values")
    return special.softmax(logits, axis=axis)


@numba.njit(cache=True, nogil=True)
def _dense_rows(W, x, y, start, stop):
    cols = W.shape[1]
    for r in range(start, stop):
        acc = np.float32(0.0)
        for j in range(cols):
            acc += W[r, j] * x[j]
        y[r] = acc


@numba.njit(cache=True, parallel=True)
def _dense_tiles(W, x, y, tile_rows):
    rows = W.shape[0]
    num_tiles = (rows + tile_rows - 1) // tile_rows
    for t in numba.prange(num_tiles):
        start = t * tile_rows
        _dense_rows(W, x, y, start, min(start + tile_rows, rows))


def _check_matvec(W, x):
    W = as_matrix(W)
    x = as_vector(x)
    if x.shape[0] != W.shape[1]:
        raise ShapeError(f"matvec of {W.shape[0]}x{W.shape[1]} matrix with vector of length {x.shape[0]}")
    return W, x


def dense_matvec(W, x):
    """
    y[i] = sum_j W[i, j] x[j], accumulated left to right in float32 per row.
    """
    W, x = _check_matvec(W, x)
    y = np.empty(W.shape[0], dtype=np.float32)
    _dense_rows(W, x, y, 0, W.shape[0])
    return y


def dense_matvec_parallel(W, x, tile_rows=64):
    """
    Row-tiled parallel dense matvec; bit-identical to dense_matvec.
    """
    W, x = _check_matvec(W, x)
    if tile_rows < 1:
        raise DomainError(f"tile_rows must be >= 1, got {tile_rows}")
    y = np.empty(W.shape[0], dtype=np.float32)
    _dense_tiles(W, x, y, tile_rows)
    return y


def dense_matmul(A, B):
    """ Batched product used by the model; no fixed summation order. """
    if A.shape[-1] != B.shape[0]:
        raise ShapeError(f"cannot multiply shapes {A.shape} and {B.shape}")
    return A @ B


def save_matrix(path, W):
    """
    Write W in the SKDM container: magic, u32 rows, u32 cols, little-endian float32 payload.
    """
    W = as_matrix(W)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MATRIX_MAGIC, W.shape[0], W.shape[1]))
        f.write(W.astype("<f4").tobytes())


def load_matrix(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise CorruptFormatError(f"{path}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(blob)
    if magic != MATRIX_MAGIC:
        raise CorruptFormatError(f"{path}: bad magic {magic!r}")
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * rows * cols:
        raise CorruptFormatError(f"{path}: expected {4 * rows * cols} payload bytes, found {len(payload)}")
    W = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(rows, cols)
    logger.debug("loaded %dx%d matrix from %s", rows, cols, path)
    return as_matrix(W)
