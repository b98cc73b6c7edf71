"""Byte-oriented range coder with 64-bit accumulators.

Carry propagation is handled with the classic cache / pending-0xFF scheme:
the encoder parks the top byte until a later addition can no longer carry
into it.  Flushing costs at most a handful of bytes, so the stream length
stays within the ideal codelength plus a small constant.

The decoder mirrors the encoder's renormalization exactly, consuming one
byte per renorm plus a fixed 9-byte preamble, which is precisely what the
encoder emitted; any read past the end of the buffer therefore means the
stream was truncated.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .gaussian import QuantizedPmf

_MASK64 = (1 << 64) - 1
_TOP = 1 << 56
_CARRY_EDGE = 0xFF << 56
_PREAMBLE = 9  # leading carry byte + 8 code bytes

# worst-case non-ideal overhead in bytes: preamble + pending-cache flush slack
CODER_OVERHEAD_BYTES = 32


class TruncatedStreamError(ValueError):
    """Decoder ran out of bytes before all symbols were recovered."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK64
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._finished = False

    def encode(self, start: int, freq: int, total: int) -> None:
        """Narrow the interval to [start, start + freq) / total."""
        if freq <= 0 or start < 0 or start + freq > total:
            raise ValueError("invalid frequency interval")
        r = self.range // total
        self.low += start * r
        self.range = freq * r
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def _shift_low(self) -> None:
        low = self.low
        if low < _CARRY_EDGE or low > _MASK64:
            carry = low >> 64
            byte = self.cache
            while self.cache_size:
                self.out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self.cache_size -= 1
            self.cache = (low >> 56) & 0xFF
        self.cache_size += 1
        self.low = (low << 8) & _MASK64

    def finish(self) -> bytes:
        if not self._finished:
            for _ in range(_PREAMBLE):
                self._shift_low()
            self._finished = True
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK64
        self.code = 0
        for _ in range(_PREAMBLE):
            self.code = ((self.code << 8) | self._next_byte()) & _MASK64

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("range-coded stream ended early")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_value(self, total: int) -> int:
        """Scaled position of the code point inside the current interval."""
        self._r = self.range // total
        v = self.code // self._r
        if v >= total:
            raise ValueError("corrupt range-coded stream")
        return v

    def advance(self, start: int, freq: int) -> None:
        """Commit to the symbol whose interval is [start, start + freq)."""
        r = self._r
        self.code -= start * r
        self.range = freq * r
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK64
            self.range <<= 8


def rc_encode(symbols: Sequence[int], pmfs: Sequence[QuantizedPmf]) -> bytes:
    """Encode one symbol per PMF; symbols must lie inside their alphabets."""
    if len(symbols) != len(pmfs):
        raise ValueError("one PMF per symbol is required")
    enc = RangeEncoder()
    for n, pmf in zip(symbols, pmfs):
        n = int(n)
        if n < pmf.n_min or n > pmf.n_max:
            raise ValueError(f"symbol {n} outside alphabet [{pmf.n_min}, {pmf.n_max}]")
        enc.encode(pmf.start(n), pmf.freq(n), pmf.total)
    return enc.finish()


def rc_decode(data: bytes, pmfs: Sequence[QuantizedPmf]) -> list[int]:
    """Recover exactly len(pmfs) symbols; inverse of rc_encode."""
    dec = RangeDecoder(data)
    out = []
    for pmf in pmfs:
        v = dec.decode_value(pmf.total)
        idx = int(np.searchsorted(pmf.cum, v, side="right")) - 1
        dec.advance(int(pmf.cum[idx]), int(pmf.freqs[idx]))
        out.append(idx + pmf.n_min)
    return out


def encode_with_tables(symbols: np.ndarray, cum: np.ndarray, freqs: np.ndarray,
                       n_min: int, total: int) -> bytes:
    """Array fast path: symbol i is coded with row i of the batch tables."""
    idx = symbols - n_min
    starts = cum[np.arange(len(idx)), idx]
    sizes = freqs[np.arange(len(idx)), idx]
    enc = RangeEncoder()
    encode = enc.encode
    for s, f in zip(starts.tolist(), sizes.tolist()):
        encode(s, f, total)
    return enc.finish()


def decode_with_tables(data: bytes, cum: np.ndarray, freqs: np.ndarray,
                       n_min: int, total: int) -> np.ndarray:
    """Array fast path inverse; returns int64 symbols."""
    dec = RangeDecoder(data)
    m = cum.shape[0]
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        row = cum[i]
        v = dec.decode_value(total)
        idx = int(np.searchsorted(row, v, side="right")) - 1
        dec.advance(int(row[idx]), int(freqs[i, idx]))
        out[i] = idx + n_min
    return out
