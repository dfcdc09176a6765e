"""Integer conversion, zero-run RLE, LZMA payload and the framed wire format.

Wire frame (little-endian)::

    magic "AVDC" | version u8 | flags u8 | C u16 | L u16 | N u8 | tau i8 |
    omega f32 | sequence u32 | payload_len u32 | payload

``payload`` is the raw LZMA2 stream of the RLE token stream of the
row-major ``C x L`` integer frame. RLE tokens are 32-bit little-endian
words: a nonzero value is a literal; a zero word is followed by an unsigned
run length >= 1.

A stream (file or socket) is a sequence of messages, each a u32 length
followed by that many bytes of wire frame; a zero-length message ends it.
"""

from __future__ import annotations

import lzma
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ElementCountError,
    InvalidParameterError,
    MalformedStreamError,
    QuantizationOverflowError,
    TruncatedFrameError,
    UnsupportedVersionError,
)

MAGIC = b"AVDC"
VERSION = 1
HEADER = struct.Struct("<4sBBHHBbfII")
LENGTH_PREFIX = struct.Struct("<I")
INT32_MAX = 2**31 - 1
# fixed so that output bytes are reproducible; 1 MiB dictionary is ample for one frame
LZMA_FILTERS = ({"id": lzma.FILTER_LZMA2, "preset": 9, "dict_size": 1 << 20},)


@dataclass(eq=False)
class QuantFrame:
    ints: np.ndarray  # (C, L) int32
    tau: int
    omega: float  # always a float32-representable value

    def __eq__(self, other):
        if not isinstance(other, QuantFrame):
            return NotImplemented
        return (
            self.tau == other.tau
            and self.omega == other.omega
            and self.ints.shape == other.ints.shape
            and np.array_equal(self.ints, other.ints)
        )


@dataclass(frozen=True)
class FrameHeader:
    version: int
    flags: int
    channels: int
    block_length: int
    subbands: int
    tau: int
    omega: float
    sequence: int
    payload_len: int


def wire_omega(omega: float) -> float:
    """``omega`` rounded to the float32 value the wire header can carry."""
    return float(np.float32(omega))


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(latent, tau: int, omega: float) -> QuantFrame:
    """``round(10**tau * latent / omega)`` with ties away from zero.

    ``omega`` is snapped to float32 first so the receiver, which only sees
    the header's f32, dequantizes with exactly the same scale.
    """
    tau = int(tau)
    if not -128 <= tau <= 127:
        raise InvalidParameterError(f"tau must fit in a signed byte, got {tau}")
    omega = wire_omega(omega)
    if not omega > 0 or not np.isfinite(omega):
        raise InvalidParameterError(f"omega must be positive and finite, got {omega}")
    scaled = (10.0**tau) * np.asarray(latent, dtype=np.float64) / omega
    if not np.all(np.isfinite(scaled)) or np.any(np.abs(scaled) > INT32_MAX):
        raise QuantizationOverflowError(
            f"latent magnitude too large for 32-bit integers at tau={tau}, omega={omega}"
        )
    return QuantFrame(_round_half_away(scaled).astype(np.int32), tau, omega)


def dequantize(q: QuantFrame) -> np.ndarray:
    return q.ints.astype(np.float64) * q.omega / (10.0**q.tau)


def rle_encode(ints) -> bytes:
    values = np.asarray(ints, dtype=np.int64).ravel()
    if values.size == 0:
        return b""
    if values.min() < -(2**31) or values.max() > INT32_MAX:
        raise InvalidParameterError("RLE input must fit in signed 32-bit integers")
    zero = values == 0
    # boundaries of maximal runs of equal "is zero" state
    edges = np.flatnonzero(np.diff(zero.astype(np.int8))) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [values.size]))
    tokens = []
    for s, e in zip(starts.tolist(), ends.tolist()):
        if zero[s]:
            tokens.append(np.array([0, e - s], dtype=np.int64))
        else:
            tokens.append(values[s:e])
    return (np.concatenate(tokens) & 0xFFFFFFFF).astype("<u4").tobytes()


def rle_decode(data: bytes) -> np.ndarray:
    if len(data) % 4:
        raise MalformedStreamError(f"RLE stream length {len(data)} is not a multiple of 4")
    words = np.frombuffer(data, dtype="<u4")
    markers = np.flatnonzero(words == 0)
    if markers.size:
        if markers[-1] + 1 >= words.size:
            raise MalformedStreamError("zero token at end of stream without a run length")
        # a marker followed by another zero word is a run of length 0
        if np.any(words[markers + 1] == 0):
            bad = int(markers[np.flatnonzero(words[markers + 1] == 0)[0]])
            raise MalformedStreamError(f"zero run of length 0 at word {bad}")
    counts = np.ones(words.size, dtype=np.int64)
    counts[markers + 1] = 0
    counts[markers] = words[markers + 1]
    return np.repeat(words.view("<i4"), counts).astype(np.int32)


def lzma_compress(data: bytes) -> bytes:
    return lzma.compress(data, format=lzma.FORMAT_RAW, filters=LZMA_FILTERS)


def lzma_decompress(data: bytes) -> bytes:
    dec = lzma.LZMADecompressor(format=lzma.FORMAT_RAW, filters=LZMA_FILTERS)
    try:
        out = dec.decompress(data)
    except lzma.LZMAError as exc:
        raise MalformedStreamError(f"corrupt LZMA payload: {exc}") from None
    if not dec.eof:
        raise TruncatedFrameError("LZMA payload ended before its end marker")
    return out


def frame_serialize(q: QuantFrame, seq: int, subbands: int = 3, flags: int = 0) -> bytes:
    C, L = q.ints.shape
    payload = lzma_compress(rle_encode(q.ints))
    header = HEADER.pack(
        MAGIC, VERSION, flags, C, L, subbands, q.tau, q.omega, seq, len(payload)
    )
    return header + payload


def parse_header(data: bytes) -> FrameHeader:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"frame does not start with {MAGIC!r}")
    if len(data) < HEADER.size:
        raise TruncatedFrameError(f"frame header needs {HEADER.size} bytes, got {len(data)}")
    _, version, flags, C, L, N, tau, omega, seq, plen = HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported frame version {version}")
    return FrameHeader(version, flags, C, L, N, tau, float(omega), seq, plen)


def frame_parse(data: bytes) -> tuple[QuantFrame, int]:
    """Inverse of :func:`frame_serialize`; returns ``(frame, sequence)``."""
    data = bytes(data)
    h = parse_header(data)
    body = data[HEADER.size:]
    if len(body) < h.payload_len:
        raise TruncatedFrameError(f"payload has {len(body)} bytes, header declares {h.payload_len}")
    if len(body) > h.payload_len:
        raise MalformedStreamError(f"{len(body) - h.payload_len} trailing bytes after payload")
    ints = rle_decode(lzma_decompress(body))
    if ints.size != h.channels * h.block_length:
        raise ElementCountError(
            f"payload holds {ints.size} values, header declares {h.channels}x{h.block_length}"
        )
    return QuantFrame(ints.reshape(h.channels, h.block_length), h.tau, h.omega), h.sequence


# -- message streams ----------------------------------------------------------


def write_message(stream, frame: bytes):
    stream.write(LENGTH_PREFIX.pack(len(frame)))
    if frame:
        stream.write(frame)


def write_end(stream):
    write_message(stream, b"")


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            break
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_message(stream) -> bytes | None:
    """Next wire frame, or ``None`` at the end-of-stream marker."""
    prefix = _read_exact(stream, LENGTH_PREFIX.size)
    if len(prefix) < LENGTH_PREFIX.size:
        raise TruncatedFrameError("stream ended without an end-of-stream marker")
    (n,) = LENGTH_PREFIX.unpack(prefix)
    if n == 0:
        return None
    frame = _read_exact(stream, n)
    if len(frame) < n:
        raise TruncatedFrameError(f"message declares {n} bytes, stream ended after {len(frame)}")
    return frame


def iter_messages(stream):
    while (frame := read_message(stream)) is not None:
        yield frame
