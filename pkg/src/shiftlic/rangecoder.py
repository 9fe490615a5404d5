"""Byte-oriented range coder with carry propagation.

32-bit range, 33-bit low held in a 64-bit state, 16-bit probability precision.
Each symbol is coded from a quantized CDF: a nondecreasing integer sequence
starting at 0 and ending at ``1 << PRECISION``; symbol ``s`` owns
``[cdf[s], cdf[s+1])``.

The encoder drops the leading cache byte (always zero) and flushes four bytes,
so a decoder consumes exactly the bytes the encoder produced.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class RangeCoderError(ValueError):
    pass


class TruncatedStreamError(RangeCoderError):
    pass


def validate_cdf(cdf: Sequence[int]) -> None:
    if len(cdf) < 2 or cdf[0] != 0 or cdf[-1] != TOTAL:
        raise RangeCoderError("CDF must start at 0 and end at 2**16")
    for a, b in zip(cdf, cdf[1:]):
        if b < a:
            raise RangeCoderError("CDF must be nondecreasing")


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int) -> None:
        if freq <= 0 or start < 0 or start + freq > TOTAL:
            raise RangeCoderError(f"invalid interval start={start} freq={freq}")
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, symbol: int, cdf: Sequence[int]) -> None:
        if not 0 <= symbol < len(cdf) - 1:
            raise RangeCoderError(f"symbol {symbol} outside CDF support of {len(cdf) - 1}")
        start = cdf[symbol]
        self.encode(start, cdf[symbol + 1] - start)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        out = bytes(self._out)
        if out[:1] != b"\x00":
            raise RangeCoderError("internal error: leading byte not zero")
        return out[1:]


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self._pos >= len(self._data):
            raise TruncatedStreamError("range decoder ran past the end of the stream")
        b = self._data[self._pos]
        self._pos += 1
        return b

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)

    def decode_symbol(self, cdf: Sequence[int]) -> int:
        r = self.range >> PRECISION
        count = self.code // r
        if count >= TOTAL:
            raise RangeCoderError("corrupt stream: code outside coding interval")
        s = bisect_right(cdf, count) - 1
        start = cdf[s]
        self.code -= r * start
        self.range = r * (cdf[s + 1] - start)
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8
        return s


def rc_encode(symbols: Sequence[int], cdfs: Sequence[Sequence[int]]) -> bytes:
    """Code ``symbols[i]`` under ``cdfs[i]``."""
    if len(symbols) != len(cdfs):
        raise RangeCoderError("one CDF per symbol required")
    enc = RangeEncoder()
    for s, cdf in zip(symbols, cdfs):
        enc.encode_symbol(int(s), cdf)
    return enc.finish()


def rc_decode(data: bytes, cdfs: Sequence[Sequence[int]]) -> list[int]:
    dec = RangeDecoder(data)
    out = [dec.decode_symbol(cdf) for cdf in cdfs]
    if not dec.exhausted:
        raise RangeCoderError(f"{len(data) - dec._pos} trailing bytes after decoding")
    return out
