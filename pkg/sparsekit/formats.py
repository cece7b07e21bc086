"""
Bitmask-compressed weight storage, N:M pattern descriptors, the SKBC/SKPM containers
and the analytic bits-per-weight / theoretical-speedup model.

Layout: each row is padded to a multiple of 32 columns and described by
ceil(cols / 32) uint32 words. Bit j of word k is column 32 * k + j (least significant
bit first). Nonzero values are packed in row-major scan order of the set bits.
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from sparsekit.compute import quantize_to_scale, round_half_away, row_scales
from sparsekit.errors import CorruptFormatError, DomainError, ShapeError
from sparsekit.tensor import as_matrix

__all__ = ["VALUE_BITS",
           "FP16_MAX",
           "BitmaskCompressed",
           "NMPattern",
           "SparsityStats",
           "pack_mask",
           "unpack_mask",
           "popcount32",
           "compress",
           "decompress",
           "bits_per_weight",
           "theoretical_speedup",
           "compression_ratio_to_sparsity",
           "sparsity_to_compression_ratio",
           "percent",
           "sparsity_of",
           "validate_nm",
           "check_nm",
           "save_compressed",
           "load_compressed",
           "save_mask",
           "load_mask"]

logger = logging.getLogger(__name__)

VALUE_BITS = {"fp32": 32, "fp16": 16, "int8": 8}
_VALUE_DTYPES = {"fp32": np.dtype("<f4"), "fp16": np.dtype("<f2"), "int8": np.dtype("i1")}
_NATIVE_DTYPES = {"fp32": np.float32, "fp16": np.float16, "int8": np.int8}
_WIDTH_TAGS = {"fp32": 0, "fp16": 1, "int8": 2}
_TAG_WIDTHS = {tag: width for width, tag in _WIDTH_TAGS.items()}

FP16_MAX = float(np.finfo(np.float16).max)
COMPRESSED_MAGIC = b"SKBC"
MASK_MAGIC = b"SKPM"
_SHAPE_HEADER = struct.Struct("<4sII")


def _check_width(value_width):
    if value_width not in VALUE_BITS:
        raise DomainError(f"unknown value width {value_width!r}; use one of {sorted(VALUE_BITS)}")


def popcount32(words):
    """
    Number of set bits in each element of a uint32 array (parallel bit count).
    """
    v = np.asarray(words, dtype=np.uint32).astype(np.uint64)
    v = v - ((v >> 1) & 0x55555555)
    v = (v & 0x33333333) + ((v >> 2) & 0x33333333)
    v = (v + (v >> 4)) & 0x0F0F0F0F
    return ((v * 0x01010101) & 0xFFFFFFFF) >> 24


def pack_mask(keep):
    """
    Pack a boolean [rows, cols] array into uint32 words of shape [rows, ceil(cols/32)].
    """
    keep = np.asarray(keep, dtype=bool)
    rows, cols = keep.shape
    words = -(-cols // 32)
    padded = np.zeros((rows, 32 * words), dtype=bool)
    padded[:, :cols] = keep
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u4").astype(np.uint32).reshape(rows, words)


def unpack_mask(mask_words, cols):
    """ Inverse of pack_mask: boolean array of shape [rows, cols]. """
    mask_words = np.ascontiguousarray(mask_words, dtype="<u4")
    rows = mask_words.shape[0]
    as_bytes = mask_words.view(np.uint8).reshape(rows, 4 * mask_words.shape[1])
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")
    return bits[:, :cols].astype(bool)


@dataclass(frozen=True, eq=False)
class BitmaskCompressed:
    """
    Bitmask-compressed matrix.

    Fields:
        - rows, cols: logical shape
        - mask_words: uint32 array [rows, ceil(cols/32)], pad bits zero
        - values: packed nonzeros, dtype float32 / float16 / int8 per value_width
        - value_width: "fp32", "fp16" (emulated) or "int8"
        - scales: float32 array [rows] iff value_width == "int8", else None
        - row_ptr: derived, int64 [rows + 1], offset of each row's first packed value
    """
    rows: int
    cols: int
    mask_words: np.ndarray
    values: np.ndarray
    value_width: str = "fp32"
    scales: np.ndarray = None
    row_ptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        _check_width(self.value_width)
        words = -(-self.cols // 32)
        mask_words = np.ascontiguousarray(self.mask_words, dtype=np.uint32)
        if mask_words.shape != (self.rows, words):
            raise CorruptFormatError(
                f"mask words have shape {mask_words.shape}, expected {(self.rows, words)}")
        tail = self.cols % 32
        if tail and words and np.any(mask_words[:, -1] >> np.uint32(tail)):
            raise CorruptFormatError("pad bits beyond cols are set")
        values = np.ascontiguousarray(self.values, dtype=_NATIVE_DTYPES[self.value_width])
        if values.ndim != 1:
            raise CorruptFormatError("values must be a flat array")
        if self.value_width != "int8" and not np.all(np.isfinite(values)):
            raise CorruptFormatError("stored values must be finite")
        per_row = popcount32(mask_words).sum(axis=1, dtype=np.int64)
        row_ptr = np.zeros(self.rows + 1, dtype=np.int64)
        np.cumsum(per_row, out=row_ptr[1:])
        if row_ptr[-1] != values.shape[0]:
            raise CorruptFormatError(
                f"mask popcount {row_ptr[-1]} does not match {values.shape[0]} stored values")
        scales = self.scales
        if self.value_width == "int8":
            if scales is None:
                raise CorruptFormatError("int8 payload requires per-row scales")
            scales = np.ascontiguousarray(scales, dtype=np.float32)
            if scales.shape != (self.rows,) or np.any(scales < 0) or not np.all(np.isfinite(scales)):
                raise CorruptFormatError("scales must be finite, nonnegative, one per row")
        elif scales is not None:
            raise CorruptFormatError(f"scales are only stored for int8 payloads, not {self.value_width}")
        object.__setattr__(self, "mask_words", mask_words)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "row_ptr", row_ptr)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self):
        return int(self.values.shape[0])

    @property
    def density(self):
        size = self.rows * self.cols
        return self.nnz / size if size else 0.0

    def keep(self):
        return unpack_mask(self.mask_words, self.cols)

    def dequantized_values(self):
        """ Packed values widened to float32 (and multiplied by their row scale for int8). """
        if self.value_width == "int8":
            row_of = np.repeat(np.arange(self.rows), np.diff(self.row_ptr))
            return self.values.astype(np.float32) * self.scales[row_of]
        return self.values.astype(np.float32)


def compress(W, value_width="fp32"):
    """
    Store W in bitmask form; a mask bit is set iff the entry is nonzero.

    INPUT:
        - W: DenseMatrix
        - value_width: "fp32", "fp16" (values rounded through IEEE half; entries that
          overflow it raise DomainError) or "int8"
          (per-row symmetric quantization, scale = max|nonzero| / 127)

    OUTPUT:
        - BitmaskCompressed
    """
    _check_width(value_width)
    W = as_matrix(W)
    keep = W != 0
    values = W[keep]
    scales = None
    if value_width == "fp16":
        with np.errstate(over="ignore"):
            values = values.astype(np.float16)
        if not np.all(np.isfinite(values)):
            big = float(np.max(np.abs(W)))
            raise DomainError(f"|w| = {big:.6g} overflows fp16 (largest finite value {FP16_MAX:g})")
    elif value_width == "int8":
        scales = row_scales(W)
        row_of = np.nonzero(keep)[0]
        values = quantize_to_scale(values, scales[row_of])
    return BitmaskCompressed(rows=W.shape[0], cols=W.shape[1], mask_words=pack_mask(keep),
                             values=values, value_width=value_width, scales=scales)


def decompress(c):
    """
    Materialize the dense matrix: zeros where the mask bit is clear, stored
    (dequantized) values where it is set.
    """
    if not isinstance(c, BitmaskCompressed):
        raise CorruptFormatError(f"expected BitmaskCompressed, got {type(c).__name__}")
    dense = np.zeros((c.rows, c.cols), dtype=np.float32)
    dense[c.keep()] = c.dequantized_values()
    return dense


def bits_per_weight(value_bits, density):
    """ 1 mask bit per position plus value_bits for every stored value. """
    if value_bits not in (32, 16, 8):
        raise DomainError(f"value_bits must be 32, 16 or 8, got {value_bits}")
    if not 0.0 <= density <= 1.0:
        raise DomainError(f"density must lie in [0, 1], got {density}")
    return 1.0 + value_bits * density


def theoretical_speedup(dense_bits, value_bits, density):
    """ Memory-bound speedup over dense storage: dense_bits / bits_per_weight. """
    if dense_bits <= 0:
        raise DomainError(f"dense_bits must be positive, got {dense_bits}")
    return dense_bits / bits_per_weight(value_bits, density)


def compression_ratio_to_sparsity(ratio):
    """ s = 1 - 1 / ratio. """
    if ratio < 1:
        raise DomainError(f"compression ratio must be >= 1, got {ratio}")
    return 1.0 - 1.0 / ratio


def sparsity_to_compression_ratio(sparsity):
    """ ratio = 1 / (1 - s), defined for s in [0, 1). """
    if not 0.0 <= sparsity < 1.0:
        raise DomainError(f"sparsity must lie in [0, 1) for a finite ratio, got {sparsity}")
    return 1.0 / (1.0 - sparsity)


def percent(fraction):
    """ Integer percent, halves rounded up. """
    return int(round_half_away(100.0 * fraction))


@dataclass(frozen=True)
class NMPattern:
    """ n nonzeros in every block of m consecutive weights along a row. """
    n: int
    m: int

    def __post_init__(self):
        if not 1 <= self.n <= self.m:
            raise DomainError(f"N:M pattern requires 1 <= n <= m, got {self.n}:{self.m}")

    @classmethod
    def parse(cls, text):
        try:
            n, m = (int(part) for part in text.strip().split(":"))
        except ValueError:
            raise DomainError(f"bad N:M pattern {text!r}; expected e.g. '16:32'") from None
        return cls(n, m)

    @property
    def sparsity(self):
        return 1.0 - self.n / self.m

    def __str__(self):
        return f"{self.n}:{self.m}"


def validate_nm(W, pattern, exact=False):
    """
    True iff m divides cols and every length-m row block holds at most n nonzeros
    (exactly n when exact=True).
    """
    W = np.asarray(W)
    rows, cols = W.shape
    if cols % pattern.m:
        return False
    counts = np.count_nonzero(W.reshape(rows, cols // pattern.m, pattern.m), axis=2)
    return bool(np.all(counts == pattern.n) if exact else np.all(counts <= pattern.n))


def check_nm(W, pattern):
    if W.shape[1] % pattern.m:
        raise ShapeError(f"block length {pattern.m} does not divide row length {W.shape[1]}")
    if not validate_nm(W, pattern):
        raise DomainError(f"matrix does not conform to {pattern}")


@dataclass(frozen=True)
class SparsityStats:
    sparsity: float
    nnz: int
    size: int
    value_width: str
    bits_per_weight: float
    theoretical_speedup: float

    def as_dict(self):
        return dict(sparsity=self.sparsity, nnz=self.nnz, size=self.size,
                    value_width=self.value_width, bits_per_weight=self.bits_per_weight,
                    theoretical_speedup=self.theoretical_speedup)


def sparsity_of(W, value_width="fp16", dense_bits=None):
    """
    Count exact zeros of W and fill the storage model for `value_width`.

    INPUT:
        - W: DenseMatrix (or BitmaskCompressed, counted from its mask)
        - value_width: payload width of the bitmask format
        - dense_bits: width of the dense baseline; defaults to the payload width

    OUTPUT:
        - SparsityStats
    """
    _check_width(value_width)
    if isinstance(W, BitmaskCompressed):
        size, nnz = W.rows * W.cols, W.nnz
    else:
        W = np.asarray(W)
        size, nnz = W.size, int(np.count_nonzero(W))
    density = nnz / size if size else 0.0
    bits = VALUE_BITS[value_width]
    dense_bits = bits if dense_bits is None else dense_bits
    return SparsityStats(sparsity=1.0 - density, nnz=nnz, size=size, value_width=value_width,
                         bits_per_weight=bits_per_weight(bits, density),
                         theoretical_speedup=theoretical_speedup(dense_bits, bits, density))


def save_compressed(path, c):
    """
    SKBC container: magic, u32 rows, u32 cols, u8 width tag, little-endian mask words,
    packed values, then per-row float32 scales for int8.
    """
    with open(path, "wb") as f:
        f.write(_SHAPE_HEADER.pack(COMPRESSED_MAGIC, c.rows, c.cols))
        f.write(struct.pack("<B", _WIDTH_TAGS[c.value_width]))
        f.write(c.mask_words.astype("<u4").tobytes())
        f.write(c.values.astype(_VALUE_DTYPES[c.value_width]).tobytes())
        if c.value_width == "int8":
            f.write(c.scales.astype("<f4").tobytes())


def _read_exact(blob, offset, nbytes, path, what):
    if offset + nbytes > len(blob):
        raise CorruptFormatError(f"{path}: truncated {what}")
    return blob[offset:offset + nbytes], offset + nbytes


def load_compressed(path):
    with open(path, "rb") as f:
        blob = f.read()
    head, offset = _read_exact(blob, 0, _SHAPE_HEADER.size + 1, path, "header")
    magic, rows, cols = _SHAPE_HEADER.unpack_from(head)
    if magic != COMPRESSED_MAGIC:
        raise CorruptFormatError(f"{path}: bad magic {magic!r}")
    tag = head[-1]
    if tag not in _TAG_WIDTHS:
        raise CorruptFormatError(f"{path}: unknown value width tag {tag}")
    value_width = _TAG_WIDTHS[tag]
    words = -(-cols // 32)
    raw, offset = _read_exact(blob, offset, 4 * rows * words, path, "mask words")
    mask_words = np.frombuffer(raw, dtype="<u4").astype(np.uint32).reshape(rows, words)
    nnz = int(popcount32(mask_words).sum())
    dtype = _VALUE_DTYPES[value_width]
    raw, offset = _read_exact(blob, offset, dtype.itemsize * nnz, path, "values")
    values = np.frombuffer(raw, dtype=dtype)
    scales = None
    if value_width == "int8":
        raw, offset = _read_exact(blob, offset, 4 * rows, path, "scales")
        scales = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if offset != len(blob):
        raise CorruptFormatError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return BitmaskCompressed(rows=rows, cols=cols, mask_words=mask_words, values=values,
                             value_width=value_width, scales=scales)


def save_mask(path, keep):
    """ SKPM sidecar: magic, u32 rows, u32 cols, mask words in the SKBC layout. """
    keep = np.asarray(keep, dtype=bool)
    with open(path, "wb") as f:
        f.write(_SHAPE_HEADER.pack(MASK_MAGIC, keep.shape[0], keep.shape[1]))
        f.write(pack_mask(keep).astype("<u4").tobytes())


def load_mask(path):
    with open(path, "rb") as f:
        blob = f.read()
    head, offset = _read_exact(blob, 0, _SHAPE_HEADER.size, path, "header")
    magic, rows, cols = _SHAPE_HEADER.unpack_from(head)
    if magic != MASK_MAGIC:
        raise CorruptFormatError(f"{path}: bad magic {magic!r}")
    words = -(-cols // 32)
    raw, offset = _read_exact(blob, offset, 4 * rows * words, path, "mask words")
    if offset != len(blob):
        raise CorruptFormatError(f"{path}: trailing bytes after mask")
    return unpack_mask(np.frombuffer(raw, dtype="<u4").reshape(rows, words), cols)
