"""Permutation serialization: Lehmer digits, cross-layer deltas, zig-zag mapping,
and entropy coding under per-position discrete Laplace models with an escape
symbol for large magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import Permutation
from .errors import CorruptStream, DigitOutOfRange, LengthMismatch
from .rangecoder import RangeDecoder, RangeEncoder, quantize_pmf

DEFAULT_ESCAPE_THRESHOLD = 16
N_POSITION_BUCKETS = 8
_SCALE_FLOOR = 1e-3
_DEFAULT_SCALE = 1.0


def lehmer_encode(perm: Permutation) -> np.ndarray:
    """digits[k] counts later entries smaller than entry k; uniquely determines the permutation."""
    p = perm.mapping
    b = len(p)
    less = p[None, :] < p[:, None]  # less[k, j] = p[j] < p[k]
    tail = np.triu(less, k=1)
    return tail.sum(axis=1).astype(np.int64)


def lehmer_decode(digits: np.ndarray) -> Permutation:
    digits = np.asarray(digits, dtype=np.int64)
    b = len(digits)
    for k, d in enumerate(digits):
        if not (0 <= d <= b - 1 - k):
            raise DigitOutOfRange(f"digit {d} at position {k} outside [0, {b - 1 - k}]")
    available = list(range(1, b + 1))
    out = np.empty(b, dtype=np.int64)
    for k, d in enumerate(digits):
        out[k] = available.pop(int(d))
    return Permutation(out)


def zigzag(x):
    """Map signed to nonnegative: 2x for x >= 0, -2x-1 for x < 0."""
    x = np.asarray(x, dtype=np.int64)
    return np.where(x >= 0, 2 * x, -2 * x - 1)


def unzigzag(z):
    z = np.asarray(z, dtype=np.int64)
    return np.where(z % 2 == 0, z // 2, -(z + 1) // 2)


def delta_digits(curr: np.ndarray, prev: np.ndarray) -> np.ndarray:
    curr = np.asarray(curr, dtype=np.int64)
    prev = np.asarray(prev, dtype=np.int64)
    if curr.shape != prev.shape:
        raise LengthMismatch(f"digit lengths differ: {curr.shape} vs {prev.shape}")
    return curr - prev


def undelta_digits(prev: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    prev = np.asarray(prev, dtype=np.int64)
    deltas = np.asarray(deltas, dtype=np.int64)
    if prev.shape != deltas.shape:
        raise LengthMismatch(f"digit lengths differ: {prev.shape} vs {deltas.shape}")
    return prev + deltas


def position_bucket(k: int, b: int) -> int:
    if b <= 1:
        return 0
    return min(N_POSITION_BUCKETS * k // b, N_POSITION_BUCKETS - 1)


@dataclass
class PermModelParams:
    """Per-type, per-position-bucket Laplace scales plus the escape threshold."""

    scales: dict[int, np.ndarray] = field(default_factory=dict)  # type_id -> (8,) f64
    threshold: int = DEFAULT_ESCAPE_THRESHOLD

    def scale_for(self, type_id: int, bucket: int) -> float:
        vec = self.scales.get(type_id)
        if vec is None:
            return _DEFAULT_SCALE
        return float(vec[bucket])

    def to_arrays(self) -> dict[int, np.ndarray]:
        return {t: np.asarray(v, dtype=np.float16) for t, v in self.scales.items()}


def fit_perm_model(samples: dict[int, list[np.ndarray]],
                   threshold: int = DEFAULT_ESCAPE_THRESHOLD) -> PermModelParams:
    """Maximum-likelihood Laplace scales (mean |x|) per type and position bucket.

    samples maps type_id to a list of signed digit/delta arrays, one per coded
    stream. Scales are quantized to f16 precision since they are header side
    info. Empty buckets fall back to the default scale.
    """
    scales: dict[int, np.ndarray] = {}
    for type_id, streams in samples.items():
        sums = np.zeros(N_POSITION_BUCKETS)
        counts = np.zeros(N_POSITION_BUCKETS, dtype=np.int64)
        for arr in streams:
            arr = np.asarray(arr, dtype=np.int64)
            b = len(arr)
            for k, v in enumerate(arr):
                bk = position_bucket(k, b)
                sums[bk] += abs(int(v))
                counts[bk] += 1
        vec = np.full(N_POSITION_BUCKETS, _DEFAULT_SCALE)
        nz = counts > 0
        vec[nz] = np.maximum(sums[nz] / counts[nz], _SCALE_FLOOR)
        scales[type_id] = np.float16(vec).astype(np.float64)
        scales[type_id] = np.maximum(scales[type_id], _SCALE_FLOOR)
    return PermModelParams(scales=scales, threshold=threshold)


def laplace_symbol_cdf(scale: float, threshold: int) -> np.ndarray:
    """CDF over zig-zag symbols {0..2T} plus a trailing escape symbol."""
    t = threshold
    q = math.exp(-1.0 / max(scale, _SCALE_FLOOR))
    mags = np.abs(unzigzag(np.arange(2 * t + 1)))
    weights = np.power(q, mags, dtype=np.float64)
    if q > 0:
        tail = 2.0 * (q ** (t + 1)) / (1.0 - q)
    else:
        tail = 0.0
    pmf = np.concatenate([weights, [tail]])
    return quantize_pmf(pmf)


def _bucket_cdfs(type_id: int, b: int, params: PermModelParams) -> list:
    return [laplace_symbol_cdf(params.scale_for(type_id, bk), params.threshold).tolist()
            for bk in range(N_POSITION_BUCKETS)]


def encode_perm_stream(values: np.ndarray, type_id: int, params: PermModelParams,
                       enc: RangeEncoder) -> None:
    """Entropy-code signed digit/delta values into an open range encoder."""
    values = np.asarray(values, dtype=np.int64)
    b = len(values)
    t = params.threshold
    escape_sym = 2 * t + 1
    cdfs = _bucket_cdfs(type_id, b, params)
    for k, v in enumerate(values):
        cdf = cdfs[position_bucket(k, b)]
        mag = abs(int(v))
        if mag <= t:
            sym = int(zigzag(v))
            enc.encode(cdf[sym], cdf[sym + 1] - cdf[sym])
        else:
            enc.encode(cdf[escape_sym], cdf[escape_sym + 1] - cdf[escape_sym])
            payload = mag - t
            if payload > 0xFFFF:
                raise CorruptStream(f"delta magnitude {mag} exceeds escape payload width")
            enc.encode_uniform(1 if v < 0 else 0, 2)
            enc.encode_uniform(payload >> 8, 256)
            enc.encode_uniform(payload & 0xFF, 256)


def decode_perm_stream(n: int, type_id: int, params: PermModelParams,
                       dec: RangeDecoder) -> np.ndarray:
    t = params.threshold
    escape_sym = 2 * t + 1
    cdfs = _bucket_cdfs(type_id, n, params)
    out = np.empty(n, dtype=np.int64)
    for k in range(n):
        cdf = cdfs[position_bucket(k, n)]
        sym = dec.decode(cdf)
        if sym == escape_sym:
            sign = dec.decode_uniform(2)
            payload = (dec.decode_uniform(256) << 8) | dec.decode_uniform(256)
            mag = payload + t
            out[k] = -mag if sign else mag
        else:
            out[k] = int(unzigzag(sym))
    return out


def encode_permutation_payload(perm: Permutation, type_id: int,
                               prev_digits: np.ndarray | None,
                               params: PermModelParams) -> tuple[int, bytes, np.ndarray]:
    """Code one permutation; returns (absolute flag, payload bytes, its digits).

    Absolute coding is used at chain resets (first appearance, keyframe
    segment start); otherwise digits are delta-coded against the previous
    layer's digits for the same type.
    """
    digits = lehmer_encode(perm)
    enc = RangeEncoder()
    if prev_digits is None:
        encode_perm_stream(digits, type_id, params, enc)
        return 1, enc.finish(), digits
    deltas = delta_digits(digits, prev_digits)
    encode_perm_stream(deltas, type_id, params, enc)
    return 0, enc.finish(), digits


def decode_permutation_payload(data: bytes, absolute: bool, b: int, type_id: int,
                               prev_digits: np.ndarray | None,
                               params: PermModelParams) -> tuple[Permutation, np.ndarray]:
    dec = RangeDecoder(data)
    values = decode_perm_stream(b, type_id, params, dec)
    if absolute:
        digits = values
    else:
        if prev_digits is None:
            raise CorruptStream("delta-coded permutation without a previous chain state")
        digits = undelta_digits(prev_digits, values)
    return lehmer_decode(digits), digits


def fixed_length_perm_bytes(perm: Permutation) -> bytes:
    """Ablation path: ceil(log2(B)) bits per entry, no entropy coding."""
    b = len(perm)
    width = max(0, math.ceil(math.log2(b))) if b > 1 else 0
    return pack_bits(perm.mapping - 1, width)


def fixed_length_perm_decode(data: bytes, b: int) -> Permutation:
    width = max(0, math.ceil(math.log2(b))) if b > 1 else 0
    vals = unpack_bits(data, width, b)
    return Permutation(np.asarray(vals, dtype=np.int64) + 1)


def pack_bits(values, width: int) -> bytes:
    """MSB-first fixed-width packing of nonnegative ints."""
    values = np.asarray(values, dtype=np.int64)
    if width == 0 or len(values) == 0:
        return b""
    shifts = np.arange(width - 1, -1, -1)
    bits = ((values[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bits).tobytes()


def unpack_bits(data: bytes, width: int, n: int):
    if width == 0 or n == 0:
        return np.zeros(n, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    needed = width * n
    if len(bits) < needed:
        raise CorruptStream(f"bit stream too short: {len(bits)} < {needed}")
    bits = bits[:needed].reshape(n, width).astype(np.int64)
    shifts = np.arange(width - 1, -1, -1)
    return (bits << shifts).sum(axis=1)
