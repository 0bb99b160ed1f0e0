"""Integer range coder and the quantized CDF tables it consumes.

The coder keeps a 64-bit ``low`` and a 32-bit ``range`` register, renormalises
whenever the range drops below 2**24 and emits one byte per shift, with carry
propagation through a cached byte.  Tables have 16-bit precision.

Tables are built from (mu, sigma) with float64 arithmetic restricted to
IEEE-754 basic operations (the exponential and the normal CDF are evaluated
by fixed polynomials here rather than by libm), so the same inputs give the
same tables, and therefore the same bytes, on every platform.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
MAX_HALFWIDTH = 255
RAW_BITS = 16

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class CorruptStreamError(ValueError):
    """The byte stream ended early or decodes to an impossible state."""


# ----------------------------------------------------------------------------
# platform-independent elementary functions

_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_INV_LN2 = 1.44269504088896338700e+00
_EXP_COEFFS = [1.0 / math.factorial(n) for n in range(13, -1, -1)]


def det_exp(x) -> np.ndarray:
    """exp(x) via Cody-Waite reduction and a degree-13 Taylor polynomial."""
    x = np.clip(np.asarray(x, dtype=np.float64), -745.0, 709.0)
    k = np.floor(x * _INV_LN2 + 0.5)
    r = (x - k * _LN2_HI) - k * _LN2_LO
    p = np.zeros_like(r)
    for c in _EXP_COEFFS:
        p = p * r + c
    return np.ldexp(p, k.astype(np.int64))


_AS_P = 0.3275911
_AS_A = (1.061405429, -1.453152027, 1.421413741, -0.284496736, 0.254829592)


def det_normal_cdf(x) -> np.ndarray:
    """Standard normal CDF from the Abramowitz-Stegun 7.1.26 erf approximation."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x) * 0.7071067811865476
    t = 1.0 / (1.0 + _AS_P * a)
    poly = np.zeros_like(t)
    for c in _AS_A:
        poly = (poly + c) * t
    tail = 0.5 * poly * det_exp(-(a * a))
    return np.where(x >= 0, 1.0 - tail, tail)


def det_sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = det_exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ----------------------------------------------------------------------------
# quantized tables


@dataclass(frozen=True)
class QuantizedCDF:
    """Cumulative frequencies over symbols ``offset .. offset+n-1`` (+ escape)."""

    cum: tuple
    offset: int
    escape: bool

    @property
    def num_symbols(self) -> int:
        return len(self.cum) - 1 - int(self.escape)

    def freq(self, index: int) -> int:
        return self.cum[index + 1] - self.cum[index]

    def freqs(self) -> np.ndarray:
        return np.diff(np.asarray(self.cum, dtype=np.int64))

    def index_of(self, symbol: int) -> int | None:
        i = symbol - self.offset
        if 0 <= i < self.num_symbols:
            return i
        return None

    def probability(self, symbol: int) -> float:
        i = self.index_of(symbol)
        if i is None:
            raise ValueError(f"symbol {symbol} outside table range")
        return self.freq(i) / TOTAL


def quantize_pmfs(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies (rows sum to 2**16, every entry >= 1) from row pmfs.

    Each entry starts at max(1, floor(p * 2**16)).  A deficit is handed out
    one unit at a time by largest fractional remainder; an excess (caused by
    the floor of 1) is taken back one unit at a time from the largest
    frequencies.  Ties resolve to the lower index.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    n, k = pmf.shape
    if k > TOTAL:
        raise ValueError("alphabet larger than table precision")
    t = pmf * TOTAL
    fl = np.floor(t)
    f = np.maximum(fl, 1).astype(np.int64)
    diff = TOTAL - f.sum(axis=1)
    rows = np.arange(n)[:, None]

    need = diff > 0
    if need.any():
        rem = np.where(t >= 1, t - fl, -1.0)
        order = np.argsort(-rem, axis=1, kind="stable")
        ranks = np.empty_like(order)
        ranks[rows, order] = np.arange(k)
        f += (ranks < np.maximum(diff, 0)[:, None]).astype(np.int64)
        diff = TOTAL - f.sum(axis=1)

    while (diff < 0).any():
        key = np.where(f > 1, f, 0)
        order = np.argsort(-key, axis=1, kind="stable")
        ranks = np.empty_like(order)
        ranks[rows, order] = np.arange(k)
        take = (f > 1) & (ranks < np.maximum(-diff, 0)[:, None])
        f -= take.astype(np.int64)
        diff = TOTAL - f.sum(axis=1)
    return f


def _to_cdf(freqs: np.ndarray, offset: int, escape: bool) -> QuantizedCDF:
    cum = np.concatenate([[0], np.cumsum(freqs)])
    return QuantizedCDF(tuple(int(c) for c in cum), int(offset), escape)


def table_from_pmf(pmf: Sequence[float], offset: int = 0) -> QuantizedCDF:
    """Table without escape over symbols offset .. offset+len(pmf)-1."""
    return _to_cdf(quantize_pmfs(np.asarray(pmf))[0], offset, escape=False)


def gaussian_halfwidth(sigma) -> np.ndarray:
    """Alphabet half-width for a centred Gaussian table, capped at 255."""
    s = np.asarray(sigma, dtype=np.float64)
    return np.minimum(MAX_HALFWIDTH, np.ceil(6.0 * s).astype(np.int64) + 1)


def logistic_halfwidth(scale) -> np.ndarray:
    s = np.asarray(scale, dtype=np.float64)
    return np.minimum(MAX_HALFWIDTH, np.ceil(20.0 * s).astype(np.int64) + 1)


def _interval_pmf(cdf, centre: np.ndarray, spread: np.ndarray, halfwidth: int) -> np.ndarray:
    """Rows of [p(-L), ..., p(L), escape] for a continuous CDF."""
    k = np.arange(-halfwidth, halfwidth + 1, dtype=np.float64)
    c = centre[:, None]
    s = spread[:, None]
    upper = cdf((k + 0.5 - c) / s)
    lower = cdf((k - 0.5 - c) / s)
    p = np.maximum(upper - lower, 0.0)
    esc = np.maximum(1.0 - p.sum(axis=1, keepdims=True), 0.0)
    return np.concatenate([p, esc], axis=1)


def _grouped_tables(cdf, centre, spread, halfwidths) -> list[QuantizedCDF]:
    centre = np.asarray(centre, dtype=np.float64).ravel()
    spread = np.asarray(spread, dtype=np.float64).ravel()
    halfwidths = np.asarray(halfwidths).ravel()
    out: list[QuantizedCDF | None] = [None] * centre.size
    for L in np.unique(halfwidths):
        idx = np.nonzero(halfwidths == L)[0]
        freqs = quantize_pmfs(_interval_pmf(cdf, centre[idx], spread[idx], int(L)))
        for j, i in enumerate(idx):
            out[i] = _to_cdf(freqs[j], -int(L), escape=True)
    return out


def build_cdf(mu: float, sigma: float, halfwidth: int | None = None) -> QuantizedCDF:
    """Table for N(mu, sigma^2) * U(-1/2, 1/2) over [-L, L] plus escape.

    The codec codes round(y - mu), so it always passes ``mu = 0``.
    """
    if halfwidth is None:
        halfwidth = int(gaussian_halfwidth(sigma))
    return build_gaussian_cdfs([sigma], [mu], [halfwidth])[0]


def build_gaussian_cdfs(sigmas, mus=None, halfwidths=None) -> list[QuantizedCDF]:
    sigmas = np.asarray(sigmas, dtype=np.float64).ravel()
    mus = np.zeros_like(sigmas) if mus is None else np.asarray(mus, dtype=np.float64).ravel()
    if halfwidths is None:
        halfwidths = gaussian_halfwidth(sigmas)
    return _grouped_tables(det_normal_cdf, mus, sigmas, halfwidths)


def build_logistic_cdfs(locs, scales, halfwidths=None) -> list[QuantizedCDF]:
    scales = np.asarray(scales, dtype=np.float64).ravel()
    if halfwidths is None:
        halfwidths = logistic_halfwidth(scales)
    return _grouped_tables(det_sigmoid, locs, scales, halfwidths)


# ----------------------------------------------------------------------------
# range coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self.low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int, total_bits: int = PRECISION) -> None:
        r = self.range >> total_bits
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range = (self.range << 8) & _MASK32
            self._shift_low()

    def encode_symbol(self, symbol: int, cdf: QuantizedCDF) -> None:
        i = cdf.index_of(symbol)
        if i is None:
            if not cdf.escape:
                raise ValueError(f"symbol {symbol} outside a table without escape")
            esc = len(cdf.cum) - 2
            self.encode(cdf.cum[esc], cdf.cum[esc + 1] - cdf.cum[esc])
            raw = symbol + (1 << (RAW_BITS - 1))
            if not 0 <= raw < (1 << RAW_BITS):
                raise ValueError(f"symbol {symbol} exceeds the {RAW_BITS}-bit escape range")
            self.encode(raw, 1, RAW_BITS)
            return
        self.encode(cdf.cum[i], cdf.cum[i + 1] - cdf.cum[i])

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # the first emitted byte is the initial empty cache and always zero
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise CorruptStreamError("range-coded segment ended before all symbols were decoded")
        b = self._data[self._pos]
        self._pos += 1
        return b

    @property
    def consumed(self) -> int:
        return self._pos

    def _decode_target(self, total_bits: int) -> tuple[int, int]:
        r = self.range >> total_bits
        value = self.code // r
        if value >= (1 << total_bits):
            raise CorruptStreamError("decoder state outside the coding interval")
        return r, value

    def _update(self, r: int, start: int, freq: int) -> None:
        self.code -= r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range = (self.range << 8) & _MASK32
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32

    def decode_raw(self, bits: int) -> int:
        r, value = self._decode_target(bits)
        self._update(r, value, 1)
        return value

    def decode_symbol(self, cdf: QuantizedCDF) -> int:
        r, value = self._decode_target(PRECISION)
        cum = cdf.cum
        i = bisect.bisect_right(cum, value) - 1
        self._update(r, cum[i], cum[i + 1] - cum[i])
        if cdf.escape and i == len(cum) - 2:
            return self.decode_raw(RAW_BITS) - (1 << (RAW_BITS - 1))
        return cdf.offset + i


def range_encode(symbols: Iterable[int], cdfs: Sequence[QuantizedCDF]) -> bytes:
    symbols = list(symbols)
    if len(symbols) != len(cdfs):
        raise ValueError(f"{len(symbols)} symbols but {len(cdfs)} tables")
    enc = RangeEncoder()
    for s, cdf in zip(symbols, cdfs):
        enc.encode_symbol(int(s), cdf)
    return enc.finish()


def range_decode(data: bytes, cdfs: Sequence[QuantizedCDF]) -> list[int]:
    dec = RangeDecoder(data)
    return [dec.decode_symbol(cdf) for cdf in cdfs]
