"""
Sparse matrix-vector kernels over the bitmask-compressed layout.

Each output row is one float32 accumulator fed in ascending column order, so the
sequential and tiled kernels agree bit for bit with dense_matvec(decompress(c), x).
Set bits are visited with count-trailing-zeros and cleared with w & (w - 1).
"""

import logging
import math
import os

import numba
import numba.extending
import numba.types
import numpy as np
from llvmlite import ir

from sparsekit.errors import DomainError, ShapeError
from sparsekit.formats import BitmaskCompressed
from sparsekit.tensor import as_vector

__all__ = ["sparse_matvec",
           "sparse_matvec_tiled",
           "row_nnz",
           "configure_threads",
           "THREADS_ENV"]

logger = logging.getLogger(__name__)

THREADS_ENV = "SPARSEKIT_THREADS"


@numba.extending.intrinsic
def _popcount(typingctx, x):
    """ LLVM ctpop on an integer. """
    if isinstance(x, numba.types.Integer):
        def codegen(context, builder, sig, args):
            return builder.ctpop(args[0])
        return x(x), codegen


@numba.extending.intrinsic
def _cttz(typingctx, x):
    """ LLVM cttz on an integer; undefined for 0, callers never pass it. """
    if isinstance(x, numba.types.Integer):
        def codegen(context, builder, sig, args):
            return builder.cttz(args[0], ir.Constant(ir.IntType(1), 1))
        return x(x), codegen


@numba.njit(cache=True, nogil=True)
def _row_nnz(mask_words, out):
    for r in range(mask_words.shape[0]):
        n = 0
        for k in range(mask_words.shape[1]):
            n += _popcount(np.int64(mask_words[r, k]))
        out[r] = n


@numba.njit(cache=True, nogil=True)
def _half_to_float(h):
    h = np.int64(h)
    exp = (h >> 10) & 0x1F
    mant = h & 0x3FF
    if exp == 0:
        mag = np.float32(mant) * np.float32(2.0 ** -24)
    elif exp == 31:
        mag = np.float32(np.inf) if mant == 0 else np.float32(np.nan)
    else:
        mag = np.float32(mant + 1024) * np.float32(math.ldexp(1.0, exp - 25))
    if h & 0x8000:
        return -mag
    return mag


@numba.njit(cache=True, nogil=True)
def _scaled_rows(mask_words, values, scales, row_ptr, x, y, start, stop):
    words = mask_words.shape[1]
    for r in range(start, stop):
        acc = np.float32(0.0)
        scale = scales[r]
        p = row_ptr[r]
        for k in range(words):
            w = np.int64(mask_words[r, k])
            base = 32 * k
            while w != 0:
                j = _cttz(w)
                acc += (np.float32(values[p]) * scale) * x[base + j]
                p += 1
                w &= w - 1
        y[r] = acc


@numba.njit(cache=True, nogil=True)
def _half_rows(mask_words, bits, row_ptr, x, y, start, stop):
    words = mask_words.shape[1]
    for r in range(start, stop):
        acc = np.float32(0.0)
        p = row_ptr[r]
        for k in range(words):
            w = np.int64(mask_words[r, k])
            base = 32 * k
            while w != 0:
                j = _cttz(w)
                acc += _half_to_float(bits[p]) * x[base + j]
                p += 1
                w &= w - 1
        y[r] = acc


@numba.njit(cache=True, parallel=True)
def _scaled_tiles(mask_words, values, scales, row_ptr, x, y, tile_rows):
    rows = mask_words.shape[0]
    num_tiles = (rows + tile_rows - 1) // tile_rows
    for t in numba.prange(num_tiles):
        start = t * tile_rows
        _scaled_rows(mask_words, values, scales, row_ptr, x, y, start, min(start + tile_rows, rows))


@numba.njit(cache=True, parallel=True)
def _half_tiles(mask_words, bits, row_ptr, x, y, tile_rows):
    rows = mask_words.shape[0]
    num_tiles = (rows + tile_rows - 1) // tile_rows
    for t in numba.prange(num_tiles):
        start = t * tile_rows
        _half_rows(mask_words, bits, row_ptr, x, y, start, min(start + tile_rows, rows))


def _env_threads():
    env = os.environ.get(THREADS_ENV)
    if not env:
        return None
    try:
        cap = int(env)
    except ValueError:
        raise DomainError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if cap < 1:
        raise DomainError(f"{THREADS_ENV} must be >= 1, got {cap}")
    return cap


def configure_threads(threads=None):
    """
    Set the numba thread pool size. $SPARSEKIT_THREADS caps the count: with both set the
    smaller wins, with neither the pool keeps its current size. Returns the count in effect.
    """
    if threads is not None and threads < 1:
        raise DomainError(f"thread count must be >= 1, got {threads}")
    cap = _env_threads()
    requested = [t for t in (threads, cap) if t is not None]
    if requested:
        wanted = min(requested)
        capped = min(wanted, numba.config.NUMBA_NUM_THREADS)
        if capped < wanted:
            logger.warning("requested %d threads, numba allows at most %d", wanted, capped)
        numba.set_num_threads(capped)
    return numba.get_num_threads()


def row_nnz(mask_words):
    """ Set bits per row of a [rows, words] uint32 mask. """
    mask_words = np.ascontiguousarray(mask_words, dtype=np.uint32)
    if mask_words.ndim != 2:
        raise ShapeError(f"mask words must be 2-D, got shape {mask_words.shape}")
    out = np.empty(mask_words.shape[0], dtype=np.int64)
    _row_nnz(mask_words, out)
    return out


def _kernel_args(c, x):
    if not isinstance(c, BitmaskCompressed):
        raise ShapeError(f"expected BitmaskCompressed, got {type(c).__name__}")
    x = as_vector(x)
    if x.shape[0] != c.cols:
        raise ShapeError(f"matvec of {c.rows}x{c.cols} matrix with vector of length {x.shape[0]}")
    row_ptr = np.ascontiguousarray(c.row_ptr, dtype=np.int64)
    if c.value_width == "fp16":
        return "half", (c.mask_words, c.values.view(np.uint16), row_ptr, x)
    if c.value_width == "int8":
        scales = np.ascontiguousarray(c.scales, dtype=np.float32)
    else:
        scales = np.ones(c.rows, dtype=np.float32)
    return "scaled", (c.mask_words, c.values, scales, row_ptr, x)


def sparse_matvec(c, x):
    """
    y = W x for a bitmask-compressed W, touching only stored values.

    INPUT:
        - c: BitmaskCompressed of shape [rows, cols]
        - x: vector of length cols

    OUTPUT:
        - y: float32 vector of length rows, equal to dense_matvec(decompress(c), x)
    """
    kind, args = _kernel_args(c, x)
    y = np.empty(c.rows, dtype=np.float32)
    if kind == "half":
        _half_rows(*args, y, 0, c.rows)
    else:
        _scaled_rows(*args, y, 0, c.rows)
    return y


def sparse_matvec_tiled(c, x, tile_rows=64, threads=None):
    """
    Row-tiled parallel variant of sparse_matvec; tiles run on the numba thread pool
    and the result is bit-identical to the sequential kernel.
    """
    if tile_rows < 1:
        raise DomainError(f"tile_rows must be >= 1, got {tile_rows}")
    kind, args = _kernel_args(c, x)
    configure_threads(threads)
    y = np.empty(c.rows, dtype=np.float32)
    if kind == "half":
        _half_tiles(*args, y, tile_rows)
    else:
        _scaled_tiles(*args, y, tile_rows)
    return y
