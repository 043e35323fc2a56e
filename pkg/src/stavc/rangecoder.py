"""Byte-oriented range coder with carry propagation.

Frequencies are integers summing to ``2**precision``. The encoder keeps a
33-bit ``low`` and a 32-bit ``range``; a cached byte plus a run of pending
0xFF bytes absorb carries, so output bytes are final once written.
"""
from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

import numpy as np

from .errors import CodingError, CorruptStreamError

TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class RangeEncoder:
    def __init__(self, precision: int = 16):
        self.precision = precision
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int) -> None:
        if freq <= 0:
            raise CodingError("cannot code a symbol with zero frequency")
        r = self.range >> self.precision
        self.low += r * start
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes, precision: int = 16):
        self.precision = precision
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._next()) & MASK32

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise CorruptStreamError("range-coded payload is truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cumulative: Sequence[int]) -> int:
        """Decode one symbol given ``cumulative`` = [0, f0, f0+f1, ..., total]."""
        r = self.range >> self.precision
        count = self.code // r
        total = cumulative[-1]
        if count >= total:
            raise CorruptStreamError("range-coded payload is inconsistent with its tables")
        s = bisect_right(cumulative, count) - 1
        start = cumulative[s]
        self.code -= r * start
        self.range = r * (cumulative[s + 1] - start)
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8
        return s


def cumulative_tables(freqs: np.ndarray) -> list[list[int]]:
    """Rows of ``[0, f0, f0+f1, ...]`` as Python ints for fast scalar access."""
    freqs = np.atleast_2d(freqs)
    cum = np.zeros((freqs.shape[0], freqs.shape[1] + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cum[:, 1:])
    return cum.tolist()


def _table_rows(n: int, tables: list[list[int]], table_index: Sequence[int] | None) -> Sequence[int]:
    if table_index is not None:
        if len(table_index) != n:
            raise CodingError("table_index length differs from the symbol count")
        return table_index
    if len(tables) == 1:
        return [0] * n
    if len(tables) != n:
        raise CodingError(f"{len(tables)} tables for {n} symbols")
    return range(n)


def encode_symbols(enc: RangeEncoder, symbols: Sequence[int], tables: list[list[int]],
                   table_index: Sequence[int] | None = None) -> None:
    rows = _table_rows(len(symbols), tables, table_index)
    for s, row in zip(symbols, rows):
        cum = tables[row]
        if not 0 <= s < len(cum) - 1:
            raise CodingError(f"symbol {s} outside alphabet of size {len(cum) - 1}")
        enc.encode(cum[s], cum[s + 1] - cum[s])


def decode_symbols(dec: RangeDecoder, n: int, tables: list[list[int]],
                   table_index: Sequence[int] | None = None) -> list[int]:
    rows = _table_rows(n, tables, table_index)
    return [dec.decode(tables[row]) for row in rows]


def rc_encode(symbols: Sequence[int], freq_tables: np.ndarray,
              table_index: Sequence[int] | None = None, precision: int = 16) -> bytes:
    """Encode ``symbols``; ``freq_tables`` is one shared row or one row per symbol."""
    enc = RangeEncoder(precision)
    encode_symbols(enc, [int(s) for s in symbols], cumulative_tables(freq_tables), table_index)
    return enc.finish()


def rc_decode(data: bytes, freq_tables: np.ndarray, n: int,
              table_index: Sequence[int] | None = None, precision: int = 16) -> list[int]:
    dec = RangeDecoder(data, precision)
    return decode_symbols(dec, n, cumulative_tables(freq_tables), table_index)
