"""Byte-oriented range coder over 16-bit cumulative frequency tables.

The construction is the classic carry-counting coder: a 64-bit low
accumulator, a 32-bit range, and byte renormalization whenever the range
drops below 2**24.  Carries propagate through a one-byte cache plus a run of
pending 0xFF bytes, so encoding streams in O(1) memory beyond the output
buffer.  Frequency tables total exactly 2**16, every symbol has frequency
>= 1, and decode(encode(s)) == s for any conforming table.

Coding cost stays within a fraction of a percent of sum(-log2 f/65536):
about 6 bytes of fixed flush overhead plus at most ~0.006 bits per symbol
of renormalization loss.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError

PRECISION_BITS = 16
TOTAL = 1 << PRECISION_BITS  # 65536
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


def build_cdf(probs: np.ndarray) -> np.ndarray:
    """Quantize probabilities to cumulative frequencies summing to 65536.

    `probs` is (..., n) with every entry >= 2**-16; rows are handled
    independently.  Frequencies start from round(p * 65536), every symbol is
    floored at 1, and the per-row total is corrected to exactly 65536 by
    largest-remainder adjustment (ties to the lower index).  Returns uint32
    cumulatives of shape (..., n + 1) with cdf[..., 0] == 0 and
    cdf[..., -1] == 65536.
    """
    p = np.asarray(probs, dtype=np.float64)
    n = p.shape[-1]
    if n > TOTAL:
        raise ShapeError(f"alphabet size {n} exceeds coder precision {TOTAL}")
    if n < 1:
        raise ShapeError("empty alphabet")
    flat = p.reshape(-1, n)
    if not np.all(np.isfinite(flat)):
        raise DataError("non-finite probability in cdf construction")

    scaled = flat * TOTAL
    freq = np.floor(scaled).astype(np.int64)
    rem = scaled - freq
    np.maximum(freq, 1, out=freq)
    delta = TOTAL - freq.sum(axis=1)

    grow = delta > 0
    if np.any(grow):
        q, r = np.divmod(delta[grow], n)
        sub = freq[grow]
        sub += q[:, None]
        # +1 to the r largest remainders per row; stable sort keeps tie order
        order = np.argsort(-rem[grow], axis=1, kind="stable")
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.arange(n)[None, :].repeat(order.shape[0], 0), axis=1)
        sub += ranks < r[:, None]
        freq[grow] = sub

    for i in np.nonzero(delta < 0)[0]:
        need = int(-delta[i])
        row = freq[i]
        order = np.argsort(rem[i], kind="stable")  # shave smallest remainders first
        while need:
            took = False
            for j in order:
                if row[j] > 1:
                    row[j] -= 1
                    need -= 1
                    took = True
                    if not need:
                        break
            if not took:
                raise DataError("cannot normalize cdf: alphabet larger than total")

    cdf = np.zeros((flat.shape[0], n + 1), dtype=np.uint32)
    cdf[:, 1:] = np.cumsum(freq, axis=1)
    return cdf.reshape(p.shape[:-1] + (n + 1,))


class RangeEncoder:
    """Streaming encoder; feed (cum_lo, cum_hi) pairs, then call finish()."""

    def __init__(self):
        self.low = 0  # up to 33 bits between shifts
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                self.out.append((0xFF + carry) & 0xFF)
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum_lo: int, cum_hi: int) -> None:
        r = self.range >> PRECISION_BITS
        self.low += cum_lo * r
        self.range = (cum_hi - cum_lo) * r
        while self.range < _TOP:
            self._shift_low()
            self.range = (self.range << 8) & _MASK32

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    """Mirror of RangeEncoder; reads the payload byte stream."""

    def __init__(self, payload: bytes):
        self.data = payload
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        self._read_byte()  # leading cache byte, always zero
        for _ in range(4):
            self.code = (self.code << 8) | self._read_byte()

    def _read_byte(self) -> int:
        if self.pos >= len(self.data):
            raise DataError(f"truncated payload: needed byte {self.pos}, have {len(self.data)}")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        """Scaled cumulative value locating the next symbol's frequency bin."""
        r = self.range >> PRECISION_BITS
        return min(self.code // r, TOTAL - 1)

    def advance(self, cum_lo: int, cum_hi: int) -> None:
        r = self.range >> PRECISION_BITS
        self.code -= cum_lo * r
        self.range = (cum_hi - cum_lo) * r
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._read_byte()) & _MASK32
            self.range = (self.range << 8) & _MASK32


def rc_encode(indices: np.ndarray, cdfs: np.ndarray) -> bytes:
    """Encode alphabet indices under per-symbol (or one shared) cdf rows.

    `cdfs` is (n, A+1) with one row per symbol, or (A+1,) shared by all.
    """
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    shared = cdfs.ndim == 1
    alpha = (cdfs.shape[-1] if shared else cdfs.shape[1]) - 1
    if not shared and cdfs.shape[0] != idx.size:
        raise ShapeError(f"{cdfs.shape[0]} cdf rows for {idx.size} symbols")
    bad = np.nonzero((idx < 0) | (idx >= alpha))[0]
    if bad.size:
        raise DataError(f"symbol at position {int(bad[0])} outside alphabet [0, {alpha})")
    enc = RangeEncoder()
    if shared:
        row = cdfs
        for s in idx:
            enc.encode(int(row[s]), int(row[s + 1]))
    else:
        for i, s in enumerate(idx):
            row = cdfs[i]
            enc.encode(int(row[s]), int(row[s + 1]))
    return enc.finish()


def rc_decode(payload: bytes, cdfs: np.ndarray, count: int) -> np.ndarray:
    """Decode `count` alphabet indices; tables must bit-match the encoder's."""
    dec = RangeDecoder(payload)
    out = np.empty(count, dtype=np.int64)
    shared = cdfs.ndim == 1
    for i in range(count):
        row = cdfs if shared else cdfs[i]
        t = dec.target()
        s = int(np.searchsorted(row, t, side="right")) - 1
        dec.advance(int(row[s]), int(row[s + 1]))
        out[i] = s
    return out
