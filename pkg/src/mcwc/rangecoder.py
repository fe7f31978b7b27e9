"""Bit-exact carry-less range coder with 64-bit state and byte renormalization.

CDFs are integer arrays with cdf[0] = 0, cdf[-1] = 2**16, strictly increasing.
The terminator emits the shortest byte tail that pins the final interval; the
decoder zero-pads past the end of the stream, so trailing zero bytes can be
trimmed without ambiguity.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

from .errors import CdfInvalid, CorruptStream

CDF_BITS = 16
CDF_TOTAL = 1 << CDF_BITS
_MASK = (1 << 64) - 1
_TOP = 1 << 56
_BOTTOM = 1 << 48


def validate_cdf(cdf) -> np.ndarray:
    arr = np.asarray(cdf, dtype=np.int64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise CdfInvalid("cdf must be a 1-D array with at least two entries")
    if arr[0] != 0 or arr[-1] != CDF_TOTAL:
        raise CdfInvalid(f"cdf must span [0, {CDF_TOTAL}], got [{arr[0]}, {arr[-1]}]")
    if np.any(np.diff(arr) <= 0):
        raise CdfInvalid("cdf must be strictly increasing (no zero-width bins)")
    return arr


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Turn a probability vector into a 16-bit CDF with every bin width >= 1.

    Deterministic: scales, floors at 1, and gives the rounding drift to the
    largest bin.
    """
    p = np.asarray(pmf, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] == 0:
        raise CdfInvalid("pmf must be a non-empty 1-D array")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise CdfInvalid("pmf must be finite and nonnegative")
    total = p.sum()
    if total <= 0:
        raise CdfInvalid("pmf must have positive mass")
    freqs = np.floor(p / total * CDF_TOTAL).astype(np.int64)
    freqs = np.maximum(freqs, 1)
    drift = int(freqs.sum()) - CDF_TOTAL
    if drift != 0:
        # remove (or add) drift on the largest bins, largest first
        order = np.argsort(-freqs, kind="stable")
        i = 0
        step = -1 if drift > 0 else 1
        remaining = abs(drift)
        while remaining > 0:
            j = order[i % len(order)]
            if step < 0 and freqs[j] <= 1:
                i += 1
                continue
            freqs[j] += step
            remaining -= 1
            i += 1
    cdf = np.zeros(len(freqs) + 1, dtype=np.int64)
    np.cumsum(freqs, out=cdf[1:])
    return cdf


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.rng = _MASK
        self.out = bytearray()

    def _renorm(self):
        low, rng, out = self.low, self.rng, self.out
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass  # top byte settled
            elif rng < _BOTTOM:
                rng = (-low) & (_BOTTOM - 1)  # carry-less clamp
            else:
                break
            out.append((low >> 56) & 0xFF)
            low = (low << 8) & _MASK
            rng = rng << 8
        self.low, self.rng = low, rng

    def encode(self, cum: int, freq: int):
        r = self.rng >> CDF_BITS
        self.low = (self.low + cum * r) & _MASK
        self.rng = freq * r
        self._renorm()

    def encode_many(self, cums, freqs):
        low, rng, out = self.low, self.rng, self.out
        for cum, freq in zip(cums, freqs):
            r = rng >> CDF_BITS
            low = (low + cum * r) & _MASK
            rng = freq * r
            while True:
                if (low ^ (low + rng)) < _TOP:
                    pass
                elif rng < _BOTTOM:
                    rng = (-low) & (_BOTTOM - 1)
                else:
                    break
                out.append((low >> 56) & 0xFF)
                low = (low << 8) & _MASK
                rng = rng << 8
        self.low, self.rng = low, rng

    def encode_uniform(self, value: int, size: int):
        """Encode value in [0, size) at exactly log2(size) bits; size must divide 2**16."""
        freq = CDF_TOTAL // size
        self.encode(value * freq, freq)

    def finish(self) -> bytes:
        """Emit the shortest tail whose zero-extension lands in the final interval."""
        low, rng = self.low, self.rng
        v = None
        for k in range(64, -8, -8):
            step = 1 << k
            cand = (low + step - 1) & ~(step - 1)
            if low <= cand < low + rng and cand <= _MASK:
                v = cand
                break
        if v is None:
            v = low
        tail = v.to_bytes(8, "big").rstrip(b"\x00")
        self.out.extend(tail)
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.rng = _MASK
        code = 0
        for _ in range(8):
            code = (code << 8) | self._byte()
        self.code = code

    def _byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def _renorm(self):
        low, rng, code = self.low, self.rng, self.code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOTTOM:
                rng = (-low) & (_BOTTOM - 1)
            else:
                break
            low = (low << 8) & _MASK
            rng = rng << 8
            code = ((code << 8) | self._byte()) & _MASK
        self.low, self.rng, self.code = low, rng, code

    def decode(self, cdf) -> int:
        """Decode one symbol under cdf (list or array, validated by the caller)."""
        r = self.rng >> CDF_BITS
        dv = (self.code - self.low) // r
        if dv >= CDF_TOTAL:
            dv = CDF_TOTAL - 1
        if dv < 0:
            raise CorruptStream("decoder state out of range")
        sym = bisect_right(cdf, dv) - 1
        cum = cdf[sym]
        freq = cdf[sym + 1] - cum
        self.low = (self.low + cum * r) & _MASK
        self.rng = freq * r
        self._renorm()
        return sym

    def decode_many_shared(self, cdf_list: list, n: int) -> list[int]:
        """Decode n symbols that share one CDF (plain list for bisect speed)."""
        low, rng, code = self.low, self.rng, self.code
        data, pos, size = self.data, self.pos, len(self.data)
        out = []
        append = out.append
        for _ in range(n):
            r = rng >> CDF_BITS
            dv = (code - low) // r
            if dv >= CDF_TOTAL:
                dv = CDF_TOTAL - 1
            elif dv < 0:
                self.pos = pos
                raise CorruptStream("decoder state out of range")
            sym = bisect_right(cdf_list, dv) - 1
            cum = cdf_list[sym]
            low = (low + cum * r) & _MASK
            rng = (cdf_list[sym + 1] - cum) * r
            while True:
                if (low ^ (low + rng)) < _TOP:
                    pass
                elif rng < _BOTTOM:
                    rng = (-low) & (_BOTTOM - 1)
                else:
                    break
                low = (low << 8) & _MASK
                rng = rng << 8
                b = data[pos] if pos < size else 0
                pos += 1
                code = ((code << 8) | b) & _MASK
            append(sym)
        self.low, self.rng, self.code = low, rng, code
        self.pos = pos
        return out

    def decode_uniform(self, size: int) -> int:
        freq = CDF_TOTAL // size
        r = self.rng >> CDF_BITS
        dv = (self.code - self.low) // r
        if dv >= CDF_TOTAL:
            dv = CDF_TOTAL - 1
        elif dv < 0:
            raise CorruptStream("decoder state out of range")
        sym = int(dv) // freq
        if sym >= size:
            sym = size - 1
        self.low = (self.low + sym * freq * r) & _MASK
        self.rng = freq * r
        self._renorm()
        return sym


def range_encode(symbols, cdf_provider) -> bytes:
    """Encode a symbol sequence; cdf_provider is one CDF, a sequence, or a callable."""
    enc = RangeEncoder()
    shared = _resolve_shared(cdf_provider)
    if shared is not None:
        arr = validate_cdf(shared)
        cums = arr[np.asarray(symbols, dtype=np.int64)]
        freqs = arr[np.asarray(symbols, dtype=np.int64) + 1] - cums
        enc.encode_many(cums.tolist(), freqs.tolist())
    else:
        for i, sym in enumerate(symbols):
            cdf = validate_cdf(_cdf_at(cdf_provider, i))
            if not (0 <= sym < len(cdf) - 1):
                raise CorruptStream(f"symbol {sym} outside alphabet of size {len(cdf) - 1}")
            enc.encode(int(cdf[sym]), int(cdf[sym + 1] - cdf[sym]))
    return enc.finish()


def range_decode(data: bytes, cdf_provider, n: int) -> list[int]:
    """Decode exactly n symbols with the same provider sequence used at encode."""
    dec = RangeDecoder(data)
    shared = _resolve_shared(cdf_provider)
    if shared is not None:
        cdf = validate_cdf(shared)
        return dec.decode_many_shared(cdf.tolist(), n)
    return [dec.decode(validate_cdf(_cdf_at(cdf_provider, i)).tolist()) for i in range(n)]


def _resolve_shared(provider):
    if callable(provider):
        return None
    if isinstance(provider, (list, tuple)) and provider and \
            not np.isscalar(provider[0]) and np.asarray(provider[0]).ndim > 0:
        return None  # sequence of per-position CDFs
    arr = np.asarray(provider)
    if arr.ndim == 1 and arr.dtype != object:
        return arr
    return None


def _cdf_at(provider, i):
    if callable(provider):
        return provider(i)
    return provider[i]
