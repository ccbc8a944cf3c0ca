"""Binary payload format for sparse matrix deltas, plus the byte-cost model.

Payload layout (all integers little-endian):

    offset  size  field
    0       4     magic ``b"FSRD"``
    4       1     version (currently 1)
    5       1     flags: bit0 = RLE-compressed bitmap, bit1 = dense payload
    6       4     rows   (uint32)
    10      4     cols   (uint32)
    14      4     nnz    (uint32)
    18      ...   bitmap section (absent when dense)
    ...     4*nnz values, IEEE-754 binary32

The bitmap is the row-major bit sequence of kept positions, packed 8 bits
per byte with bit i of byte j holding position 8*j + i; padding bits in the
final byte must be zero. A dense payload (bit1) carries every position in
row-major order and omits the bitmap. The RLE form replaces the packed
bytes with alternating run lengths, zeros first, each length an unsigned
LEB128 varint.

Values are narrowed to 32-bit floats on encode; in-memory deltas stay
float64. ``account`` reproduces the byte arithmetic of ``encode`` exactly
for the raw-bitmap and dense paths (RLE is data dependent).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    CorruptPayloadError,
    FormatError,
    InvalidInputError,
    ShapeError,
    TruncatedPayloadError,
)

MAGIC = b"FSRD"
VERSION = 1
FLAG_RLE = 0x01
FLAG_DENSE = 0x02
HEADER_BYTES = 18
BYTES_PER_VALUE = 4
MB = 1024 * 1024

_U32_MAX = 2**32 - 1
_HEADER_STRUCT = struct.Struct("<III")


@dataclass(frozen=True)
class SparseDelta:
    """A sparse matrix delta: shape, kept-position mask, kept values.

    ``values`` lists the kept entries in row-major order of the mask.
    Instances are treated as immutable values.
    """

    rows: int
    cols: int
    mask: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if mask.shape != (self.rows, self.cols):
            raise ShapeError(
                f"mask shape {mask.shape} != ({self.rows}, {self.cols})"
            )
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size != int(mask.sum()):
            raise InvalidInputError(
                f"{values.size} values for {int(mask.sum())} kept positions"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("sparse delta values must be finite")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", values)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def bitmap(self) -> np.ndarray:
        """Row-major kept-position bits."""
        return self.mask.ravel()

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.rows, self.cols), dtype=np.float64)
        dense[self.mask] = self.values
        return dense

    @classmethod
    def from_dense(cls, dense, mask) -> "SparseDelta":
        d = np.asarray(dense, dtype=np.float64)
        m = np.asarray(mask, dtype=bool)
        if d.ndim != 2 or m.shape != d.shape:
            raise ShapeError(f"dense {d.shape} and mask {m.shape} must match")
        return cls(d.shape[0], d.shape[1], m, d[m])

    @classmethod
    def full(cls, dense) -> "SparseDelta":
        """Wrap a dense matrix with every position kept."""
        d = np.asarray(dense, dtype=np.float64)
        return cls.from_dense(d, np.ones(d.shape, dtype=bool))

    @classmethod
    def empty(cls, rows: int, cols: int) -> "SparseDelta":
        return cls(rows, cols, np.zeros((rows, cols), dtype=bool), np.zeros(0))


class ByteAccount(NamedTuple):
    """Byte breakdown of one payload: values + bitmap + header."""

    value_bytes: int
    bitmap_bytes: int
    header_bytes: int
    total_bytes: int


def bytes_to_mb(n: int) -> float:
    """Bytes to mebibytes (1024**2 bytes per MB)."""
    return n / MB


def account(
    rows: int,
    cols: int,
    nnz: int,
    dense: bool = False,
    include_bitmap: bool = True,
) -> ByteAccount:
    """Closed-form payload cost for the raw-bitmap (non-RLE) wire layout."""
    total = rows * cols
    if not 0 <= nnz <= total:
        raise InvalidInputError(f"nnz {nnz} outside [0, {total}]")
    if dense:
        value_bytes = total * BYTES_PER_VALUE
        bitmap_bytes = 0
    else:
        value_bytes = nnz * BYTES_PER_VALUE
        bitmap_bytes = (total + 7) // 8 if include_bitmap else 0
    return ByteAccount(
        value_bytes,
        bitmap_bytes,
        HEADER_BYTES,
        value_bytes + bitmap_bytes + HEADER_BYTES,
    )


def _leb128_encode(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _leb128_read(buf: bytes, offset: int, exhausted_error) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        if offset >= len(buf):
            raise exhausted_error("varint ends past the payload")
        byte = buf[offset]
        offset += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, offset
        shift += 7


def rle_bitmap(bits) -> bytes:
    """Run-length encode a bit sequence: alternating runs, zeros first, LEB128 lengths."""
    b = np.asarray(bits, dtype=bool).ravel()
    if b.size == 0:
        return b""
    as_i8 = b.astype(np.int8)
    changes = np.flatnonzero(np.diff(as_i8)) + 1
    boundaries = np.concatenate(([0], changes, [b.size]))
    runs = np.diff(boundaries).tolist()
    if b[0]:
        runs.insert(0, 0)
    return b"".join(_leb128_encode(int(r)) for r in runs)


def _parse_rle(buf: bytes, offset: int, length: int, exhausted_error) -> tuple[np.ndarray, int]:
    bits = np.zeros(length, dtype=bool)
    fill = False
    pos = 0
    while pos < length:
        run, offset = _leb128_read(buf, offset, exhausted_error)
        if pos + run > length:
            raise CorruptPayloadError(
                f"run-length total exceeds bitmap length {length}"
            )
        if fill:
            bits[pos : pos + run] = True
        pos += run
        fill = not fill
    return bits, offset


def unrle_bitmap(data: bytes, length: int) -> np.ndarray:
    """Inverse of rle_bitmap; the stream must cover exactly `length` bits."""
    bits, offset = _parse_rle(bytes(data), 0, length, CorruptPayloadError)
    if offset != len(data):
        raise CorruptPayloadError("trailing bytes after run-length stream")
    return bits


def encode(delta: SparseDelta, use_rle: bool | str = False, dense: bool = False) -> bytes:
    """Serialize a delta. `use_rle` may be True, False, or "auto" (pick smaller)."""
    if delta.rows > _U32_MAX or delta.cols > _U32_MAX or delta.nnz > _U32_MAX:
        raise OverflowError("dimensions exceed the 32-bit wire format")
    flags = 0
    bitmap_section = b""
    if dense:
        if delta.nnz != delta.size:
            raise InvalidInputError("dense payload requires every position kept")
        flags |= FLAG_DENSE
    else:
        raw = np.packbits(delta.bitmap, bitorder="little").tobytes()
        if use_rle == "auto":
            rle = rle_bitmap(delta.bitmap)
            if len(rle) < len(raw):
                bitmap_section, flags = rle, flags | FLAG_RLE
            else:
                bitmap_section = raw
        elif use_rle:
            bitmap_section, flags = rle_bitmap(delta.bitmap), flags | FLAG_RLE
        else:
            bitmap_section = raw
    header = MAGIC + bytes((VERSION, flags)) + _HEADER_STRUCT.pack(
        delta.rows, delta.cols, delta.nnz
    )
    values = delta.values.astype("<f4").tobytes()
    return header + bitmap_section + values


def decode(payload: bytes) -> SparseDelta:
    """Parse a payload back into a SparseDelta (values carry 32-bit precision)."""
    buf = bytes(payload)
    if len(buf) < 4:
        raise TruncatedPayloadError("payload shorter than the magic")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    if len(buf) < HEADER_BYTES:
        raise TruncatedPayloadError("payload shorter than the header")
    version, flags = buf[4], buf[5]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if flags & ~(FLAG_RLE | FLAG_DENSE):
        raise FormatError(f"unknown flag bits in {flags:#04x}")
    if flags & FLAG_RLE and flags & FLAG_DENSE:
        raise FormatError("RLE and dense flags are mutually exclusive")
    rows, cols, nnz = _HEADER_STRUCT.unpack_from(buf, 6)
    total = rows * cols
    if nnz > total:
        raise CorruptPayloadError(f"nnz {nnz} exceeds {rows}x{cols}")

    offset = HEADER_BYTES
    if flags & FLAG_DENSE:
        if nnz != total:
            raise CorruptPayloadError("dense payload with nnz != rows*cols")
        mask_bits = np.ones(total, dtype=bool)
    elif flags & FLAG_RLE:
        mask_bits, offset = _parse_rle(buf, offset, total, TruncatedPayloadError)
    else:
        bitmap_len = (total + 7) // 8
        if len(buf) < offset + bitmap_len:
            raise TruncatedPayloadError("payload ends inside the bitmap")
        packed = np.frombuffer(buf, dtype=np.uint8, count=bitmap_len, offset=offset)
        bits = np.unpackbits(packed, bitorder="little")
        if bits[total:].any():
            raise CorruptPayloadError("nonzero padding bits in the bitmap")
        mask_bits = bits[:total].astype(bool)
        offset += bitmap_len

    if int(mask_bits.sum()) != nnz:
        raise CorruptPayloadError(
            f"declared nnz {nnz} != bitmap popcount {int(mask_bits.sum())}"
        )
    value_len = nnz * BYTES_PER_VALUE
    if len(buf) < offset + value_len:
        raise TruncatedPayloadError("payload ends inside the values")
    if len(buf) > offset + value_len:
        raise CorruptPayloadError("trailing bytes after the values")
    values = np.frombuffer(buf, dtype="<f4", count=nnz, offset=offset).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise CorruptPayloadError("non-finite values in payload")
    return SparseDelta(rows, cols, mask_bits.reshape(rows, cols), values)
