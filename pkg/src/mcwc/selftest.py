"""Embedded property suite behind `mcwc selftest`: quick versions of the
core invariants, printing one pass/fail line each.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import codec, diagnostics, permcode, quant, rangecoder
from .blocks import Permutation
from .entropy import EntropyFitConfig
from .predictor import TrainConfig
from .synthetic import make_synthetic_checkpoint


def _check_lehmer() -> bool:
    for b in range(1, 6):
        for p in itertools.permutations(range(1, b + 1)):
            perm = Permutation(np.array(p))
            if permcode.lehmer_decode(permcode.lehmer_encode(perm)) != perm:
                return False
    return True


def _check_range_coder() -> bool:
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(0, 2000))
        a = int(rng.integers(2, 64))
        pmf = rng.random(a) + 1e-3
        cdf = rangecoder.quantize_pmf(pmf)
        syms = rng.integers(0, a, size=n)
        data = rangecoder.range_encode(syms, cdf)
        if not np.array_equal(rangecoder.range_decode(data, cdf, n), syms):
            return False
    return True


def _check_quantizer() -> bool:
    rng = np.random.default_rng(1)
    vals = rng.standard_normal((8, 500))
    q = quant.init_quantizer(vals, 0.8, 127)
    codes = quant.quantize(vals, q)
    recon = quant.dequantize(codes, q)
    in_range = np.abs(codes) < q.q_max
    err = np.abs(vals - recon)
    bound = np.broadcast_to(q.steps[:, None] / 2 + 1e-9, err.shape)
    if not np.all(err[in_range] <= bound[in_range]):
        return False
    return np.array_equal(quant.quantize(recon.astype(np.float64), q), codes)


def _check_symmetry() -> bool:
    rng = np.random.default_rng(2)
    w1 = rng.standard_normal((16, 8))
    b1 = rng.standard_normal(16)
    w2 = rng.standard_normal((5, 16))
    b2 = rng.standard_normal(5)
    x = rng.standard_normal((20, 8))
    perm = rng.permutation(16) + 1
    if diagnostics.verify_mlp_invariance(w1, b1, w2, b2, perm, x) > 1e-10:
        return False
    h, dh = 4, 6
    dm = h * dh
    wq, wk, wv, wo = (rng.standard_normal((dm, dm)) for _ in range(4))
    hp = rng.permutation(h) + 1
    return diagnostics.verify_mha_invariance(wq, wk, wv, wo, hp, rng.standard_normal((10, dm)), dh) < 1e-10


def _check_codec_roundtrip() -> bool:
    syn = make_synthetic_checkpoint(seed=0, n_layers=5, n_types=1, blocks=8, block_dim=12)
    cfg = codec.CodecConfig(
        keyframe_interval=2, d_lat=16, d_emb=4,
        train=TrainConfig(steps=20, pred_phase_steps=15, warmup_steps=2, seed=0),
        entropy_fit=EntropyFitConfig(steps=30, seed=0))
    data, ref = codec.encode_checkpoint(syn.checkpoint, syn.specs, cfg,
                                        return_reference=True)
    out = codec.decode_checkpoint(data)
    for lr, lo in zip(ref.layers, out.layers):
        for name in lr.tensors:
            if lr.tensors[name].tobytes() != lo.tensors[name].tobytes():
                return False
    report = codec.rate_report(data)
    return report.total_bits == 8 * len(data)


def run_selftest() -> bool:
    checks = [
        ("lehmer round trip (exhaustive B<=5)", _check_lehmer),
        ("range coder fuzz", _check_range_coder),
        ("quantizer half-step and fixed point", _check_quantizer),
        ("mlp/mha permutation invariance", _check_symmetry),
        ("codec bit-exact round trip", _check_codec_roundtrip),
    ]
    all_ok = True
    for name, fn in checks:
        ok = fn()
        all_ok &= ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return all_ok
