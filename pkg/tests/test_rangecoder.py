import numpy as np
import pytest

from mcwc import errors
from mcwc.rangecoder import (
    CDF_TOTAL,
    RangeDecoder,
    RangeEncoder,
    quantize_pmf,
    range_decode,
    range_encode,
    validate_cdf,
)


def test_uniform_256_codelength(rng):
    syms = rng.integers(0, 256, size=1000)
    cdf = np.arange(257, dtype=np.int64) * 256
    data = range_encode(syms, cdf)
    assert 1000 <= len(data) <= 1006
    assert np.array_equal(range_decode(data, cdf, 1000), syms)


def test_empty_stream():
    cdf = np.array([0, 32768, 65536])
    data = range_encode([], cdf)
    assert len(data) <= 8
    assert range_decode(data, cdf, 0) == []


def test_fuzz_roundtrip(rng):
    for _ in range(200):
        a = int(rng.integers(2, 300))
        pmf = rng.random(a) ** 2 + 1e-4
        cdf = quantize_pmf(pmf)
        n = int(rng.integers(0, 800))
        syms = rng.choice(a, size=n, p=pmf / pmf.sum())
        data = range_encode(syms, cdf)
        assert np.array_equal(range_decode(data, cdf, n), syms)


def test_per_position_cdfs(rng):
    cdfs = [quantize_pmf(rng.random(int(rng.integers(2, 20))) + 0.01)
            for _ in range(100)]
    syms = [int(rng.integers(0, len(c) - 1)) for c in cdfs]
    data = range_encode(syms, cdfs)
    assert range_decode(data, cdfs, 100) == syms


def test_realized_close_to_entropy(rng):
    for _ in range(5):
        a = 100
        pmf = rng.random(a) ** 3 + 1e-4
        cdf = quantize_pmf(pmf)
        p = np.diff(cdf) / CDF_TOTAL
        syms = rng.choice(a, size=4000, p=pmf / pmf.sum())
        data = range_encode(syms, cdf)
        nll = -np.log2(p[syms]).sum()
        assert 8 * len(data) <= nll + 40


def test_adversarial_bytes_never_crash(rng):
    cdf = quantize_pmf(np.ones(17))
    for _ in range(100):
        junk = rng.integers(0, 256, size=int(rng.integers(0, 64))).astype(np.uint8).tobytes()
        try:
            out = range_decode(junk, cdf, 50)
            assert len(out) == 50
            assert all(0 <= s < 17 for s in out)
        except errors.CorruptStream:
            pass


def test_cdf_validation():
    with pytest.raises(errors.CdfInvalid):
        validate_cdf([0, 10, 10, CDF_TOTAL])  # zero-width bin
    with pytest.raises(errors.CdfInvalid):
        validate_cdf([0, 10, 20])  # wrong total
    with pytest.raises(errors.CdfInvalid):
        quantize_pmf(np.array([0.0, -1.0]))


def test_quantize_pmf_floors_and_sums():
    pmf = np.array([1e-12, 1.0, 1e-12, 0.5])
    cdf = quantize_pmf(pmf)
    widths = np.diff(cdf)
    assert np.all(widths >= 1)
    assert cdf[-1] == CDF_TOTAL


def test_uniform_helpers_roundtrip(rng):
    enc = RangeEncoder()
    bits = rng.integers(0, 2, size=64).tolist()
    bytes_vals = rng.integers(0, 256, size=32).tolist()
    for b in bits:
        enc.encode_uniform(b, 2)
    for v in bytes_vals:
        enc.encode_uniform(v, 256)
    dec = RangeDecoder(enc.finish())
    assert [dec.decode_uniform(2) for _ in bits] == bits
    assert [dec.decode_uniform(256) for _ in bytes_vals] == bytes_vals
