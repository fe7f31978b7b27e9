import struct
from dataclasses import replace

import numpy as np
import pytest

from conftest import checkpoints_bit_equal, tiny_codec_config
from mcwc import errors
from mcwc.blocks import BlockMember, BlockTypeSpec
from mcwc.codec import (
    MAGIC,
    VERSION,
    CodecConfig,
    align_checkpoint,
    component_fractions,
    decode_checkpoint,
    decode_segments_parallel,
    effective_specs,
    encode_checkpoint,
    extract_side_info,
    keyframe_indicator,
    parse_header,
    rate_report,
    reconstruction_mse,
    segment_count,
    select_operating_point,
    write_header,
)
from mcwc.container import Checkpoint, LayerTensors, save_checkpoint, load_checkpoint
from mcwc.synthetic import make_synthetic_checkpoint


def small_stream(seed=0, **cfg_over):
    syn = make_synthetic_checkpoint(seed=seed, n_layers=8, n_types=2, blocks=10,
                                    block_dim=16, with_bias=True)
    cfg = tiny_codec_config(**cfg_over)
    data, ref = encode_checkpoint(syn.checkpoint, syn.specs, cfg, return_reference=True)
    return syn, cfg, data, ref


def test_keyframe_indicator():
    assert keyframe_indicator(1, 4) == 1
    assert keyframe_indicator(5, 4) == 1
    assert keyframe_indicator(3, 4) == 0
    assert all(keyframe_indicator(l, 1) == 1 for l in range(1, 9))
    with pytest.raises(ValueError):
        keyframe_indicator(0, 4)


def test_single_layer_checkpoint_all_keyframe(rng):
    ckpt = Checkpoint(arch_id=3, layers=[LayerTensors(index=1, tensors={
        "w": rng.standard_normal((6, 4)).astype(np.float32)})])
    spec = [BlockTypeSpec(0, [BlockMember("w", 0)])]
    cfg = tiny_codec_config()
    data, ref = encode_checkpoint(ckpt, spec, cfg, return_reference=True)
    out = decode_checkpoint(data)
    assert checkpoints_bit_equal(ref, out)
    report = rate_report(data)
    assert report.residual_code_bits == 0
    assert report.keyframe_code_bits > 0


def test_roundtrip_bit_exact():
    syn, cfg, data, ref = small_stream()
    out = decode_checkpoint(data)
    assert checkpoints_bit_equal(ref, out)


def test_encode_deterministic():
    syn, cfg, data, _ = small_stream()
    data2 = encode_checkpoint(syn.checkpoint, syn.specs, cfg)
    assert data == data2


def test_decoder_deterministic():
    _, _, data, _ = small_stream()
    a = decode_checkpoint(data)
    b = decode_checkpoint(data)
    assert checkpoints_bit_equal(a, b)


@pytest.mark.parametrize("flags", [
    {"no_alignment": True},
    {"random_alignment": True},
    {"no_predictor": True},
    {"fixed_length_codes": True},
    {"fixed_length_perms": True},
    {"delta_perm_coding": False},
    {"residual_energy_alignment": True},
    {"learned_means": True},
    {"gain_gating": False},
])
def test_ablation_flags_roundtrip(flags):
    syn, cfg, data, ref = small_stream(**flags)
    out = decode_checkpoint(data)
    assert checkpoints_bit_equal(ref, out)


def test_no_predictor_is_identity_prediction():
    # with the predictor disabled, residual = current - previous decoded blocks
    syn, cfg, data, ref = small_stream(no_predictor=True)
    pb = parse_header(data)
    assert pb.flags["no_predictor"] is True
    assert pb.flags["predictor_present"] is False
    assert checkpoints_bit_equal(ref, decode_checkpoint(data))


def test_reencode_idempotence_on_quantized_manifold():
    syn, cfg, data, _ = small_stream(seed=4)
    w1 = decode_checkpoint(data)
    side = extract_side_info(data)
    data2 = encode_checkpoint(w1, syn.specs, cfg, side_info=side)
    w2 = decode_checkpoint(data2)
    assert checkpoints_bit_equal(w1, w2)


def test_header_roundtrip_and_errors():
    _, _, data, _ = small_stream()
    pb = parse_header(data)
    assert write_header(pb) == data[:pb.records_start]
    bad = bytearray(data)
    bad[:4] = b"XXXX"
    with pytest.raises(errors.BadMagic):
        parse_header(bytes(bad))
    bumped = bytearray(data)
    bumped[4:6] = struct.pack("<H", VERSION + 1)
    with pytest.raises(errors.UnsupportedVersion):
        parse_header(bytes(bumped))
    assert data[:4] == MAGIC


def test_truncated_stream_reports_corrupt():
    _, _, data, _ = small_stream()
    pb = parse_header(data)
    cut = pb.records_start + (pb.trailer_offset - pb.records_start) // 2
    with pytest.raises((errors.CorruptStream, errors.RecordCountMismatch)):
        decode_checkpoint(data[:cut])


def test_record_reorder_detected():
    _, _, data, _ = small_stream()
    pb = parse_header(data)
    offs = pb.trailer["record_offsets"]
    lens = pb.trailer["record_lengths"]
    # swap the first two record payloads in place
    a0, a1 = offs[0], offs[1]
    l0, l1 = lens[0], lens[1]
    body = data[a0:a0 + l0]
    body2 = data[a1:a1 + l1]
    swapped = data[:a0] + body2 + body + data[a1 + l1:]
    with pytest.raises((errors.CorruptStream, errors.RecordCountMismatch)):
        decode_checkpoint(swapped)


def test_rate_breakdown_sums_exactly():
    for seed in range(3):
        _, _, data, _ = small_stream(seed=seed)
        r = rate_report(data)
        assert r.total_bits == 8 * len(data)
        assert sum(r.components().values()) == r.total_bits
        assert r.model_bits <= r.meta_bits


def test_component_fractions_table_values():
    comps = {
        "keyframe_codes": int(6.20e8),
        "residual_codes": int(1.55e9),
        "permutation_side_info": int(1.30e8),
        "quantizer_side_info": int(6.00e7),
        "meta": int(4.00e7),
    }
    assert sum(comps.values()) == int(2.40e9)
    fr = component_fractions(comps)
    assert fr == {"keyframe_codes": 25.8, "residual_codes": 64.6,
                  "permutation_side_info": 5.4, "quantizer_side_info": 2.5,
                  "meta": 1.7}


def test_degenerate_stream_meta_dominates(rng):
    ckpt = Checkpoint(arch_id=0, layers=[LayerTensors(index=1, tensors={
        "w": np.zeros((2, 2), dtype=np.float32)})])
    data = encode_checkpoint(ckpt, [], tiny_codec_config())
    r = rate_report(data)
    assert r.meta_bits / r.total_bits > 0.9


def test_segment_counts():
    assert segment_count(24, 4) == 6
    assert segment_count(24, 6) == 4
    assert segment_count(24, 8) == 3
    assert segment_count(32, 4) == 8
    assert segment_count(32, 8) == 4
    assert segment_count(32, 16) == 2


def test_parallel_decode_matches_sequential():
    syn = make_synthetic_checkpoint(seed=1, n_layers=11, n_types=2, blocks=8,
                                    block_dim=12, with_bias=True)
    cfg = tiny_codec_config(keyframe_interval=3)
    data = encode_checkpoint(syn.checkpoint, syn.specs, cfg)
    seq = decode_checkpoint(data)
    for workers in (1, 2, 8):
        par = decode_segments_parallel(data, workers=workers)
        assert checkpoints_bit_equal(seq, par)


def test_keyframe_reset_bounds_error_independently_of_history(rng):
    # corrupt drift is impossible: keyframe reconstruction error is set by its
    # own quantizer step, not by anything decoded earlier
    syn = make_synthetic_checkpoint(seed=7, n_layers=9, n_types=1, blocks=8,
                                    block_dim=16, drift=0.5)
    cfg = tiny_codec_config(keyframe_interval=4)
    data = encode_checkpoint(syn.checkpoint, syn.specs, cfg)
    out = decode_checkpoint(data)
    extracted, aligned, perms = align_checkpoint(syn.checkpoint, syn.specs, cfg)
    pb = parse_header(data)
    for li in (1, 5, 9):
        name = "t0.w"
        orig = syn.checkpoint.layers[li - 1].tensors[name]
        rec = out.layers[li - 1].tensors[name]
        err = np.abs(orig - rec).max()
        # range-calibrated keyframe quantizer: error <= max|v| / q_max
        bound = np.abs(orig).max() / pb.meta["quant"]["q_max_keyframe"]
        assert err <= bound + 1e-6


def test_uncovered_tensors_coded_as_keyframe_records():
    syn, cfg, data, ref = small_stream()
    pb = parse_header(data)
    raw_ids = [s.type_id for s in pb.specs if s.raw]
    assert raw_ids, "bias tensors should get raw specs"
    keys = pb.record_keys()
    assert len(keys) == len(pb.trailer["record_keys"])
    # every raw record is keyframe mode: q_max is the keyframe range
    side = extract_side_info(data)
    for (li, tid), q in side.quantizers.items():
        if tid in raw_ids:
            assert q.q_max == cfg.q_max_keyframe


def test_effective_specs_rejects_double_coverage(rng):
    ckpt = Checkpoint(arch_id=0, layers=[LayerTensors(index=1, tensors={
        "w": rng.standard_normal((4, 4)).astype(np.float32)})])
    dup = [BlockTypeSpec(0, [BlockMember("w", 0)]),
           BlockTypeSpec(1, [BlockMember("w", 1)])]
    with pytest.raises(errors.InvalidCheckpoint):
        effective_specs(ckpt, dup)


def test_inconsistent_block_count_rejected(rng):
    layers = [
        LayerTensors(index=1, tensors={"w": rng.standard_normal((4, 3)).astype(np.float32)}),
        LayerTensors(index=2, tensors={"w": rng.standard_normal((6, 3)).astype(np.float32)}),
    ]
    ckpt = Checkpoint(arch_id=0, layers=layers)
    with pytest.raises(errors.BlockCountMismatch):
        encode_checkpoint(ckpt, [BlockTypeSpec(0, [BlockMember("w", 0)])],
                          tiny_codec_config(keyframe_interval=8))


def test_type_absent_then_reappears(rng):
    # a type that skips a layer restarts with an absolute-coded keyframe record
    mk = lambda shape: rng.standard_normal(shape).astype(np.float32)
    layers = [
        LayerTensors(index=1, tensors={"w": mk((4, 3)), "x": mk((5,))}),
        LayerTensors(index=2, tensors={"x": mk((5,))}),
        LayerTensors(index=3, tensors={"w": mk((4, 3)), "x": mk((5,))}),
        LayerTensors(index=4, tensors={"w": mk((4, 3)), "x": mk((5,))}),
    ]
    ckpt = Checkpoint(arch_id=0, layers=layers)
    specs = [BlockTypeSpec(0, [BlockMember("w", 0)])]
    cfg = tiny_codec_config(keyframe_interval=8)
    data, ref = encode_checkpoint(ckpt, specs, cfg, return_reference=True)
    out = decode_checkpoint(data)
    assert checkpoints_bit_equal(ref, out)


def test_activations_steer_alignment(rng):
    # two blocks with identical weights but distinct activations: only the
    # hybrid similarity can disambiguate the planted swap
    base = rng.standard_normal((1, 6)).astype(np.float32)
    w = np.concatenate([base, base], axis=0)
    layers = [LayerTensors(index=i, tensors={"w": w.copy()}) for i in (1, 2)]
    ckpt = Checkpoint(arch_id=0, layers=layers)
    specs = [BlockTypeSpec(0, [BlockMember("w", 0)])]
    acts = {(1, 0): np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32),
            (2, 0): np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)}
    cfg = tiny_codec_config(gain_gating=False)
    _, _, perms = align_checkpoint(ckpt, specs, cfg, acts)
    assert not perms[(2, 0)].is_identity()


def test_select_operating_point():
    syn = make_synthetic_checkpoint(seed=2, n_layers=6, n_types=1, blocks=8, block_dim=12)
    cfg = tiny_codec_config()
    chosen, results = select_operating_point(syn.checkpoint, syn.specs, cfg,
                                             lambdas=[1e-4, 1e-2])
    assert len(results) == 2
    assert chosen in results
    target = max(r["report"].bits_per_param for r in results)
    chosen2, _ = select_operating_point(syn.checkpoint, syn.specs, cfg,
                                        lambdas=[1e-4, 1e-2],
                                        target_bits_per_param=target)
    assert chosen2["report"].bits_per_param <= target


def test_container_roundtrip_of_decoded(tmp_path):
    _, _, data, _ = small_stream()
    out = decode_checkpoint(data)
    p = tmp_path / "dec.ckpt"
    save_checkpoint(out, p)
    again = load_checkpoint(p)
    assert checkpoints_bit_equal(out, again)


def test_keyframes_never_consult_predictor(monkeypatch):
    # instrumentation counter: with K=1 every layer is a keyframe and the
    # predictor must not be evaluated at all during the coding pass
    import mcwc.codec as codec_mod
    calls = {"n": 0}
    orig = codec_mod.predict_batch

    def counting(*args, **kwargs):
        calls["n"] += 1
        return orig(*args, **kwargs)

    monkeypatch.setattr(codec_mod, "predict_batch", counting)
    syn = make_synthetic_checkpoint(seed=3, n_layers=6, n_types=1, blocks=6,
                                    block_dim=8)
    cfg = tiny_codec_config(keyframe_interval=1)
    data = encode_checkpoint(syn.checkpoint, syn.specs, cfg)
    assert calls["n"] == 0
    decode_checkpoint(data)
    assert calls["n"] == 0
    # sanity: with K=4 the predictive records do evaluate it
    cfg4 = tiny_codec_config(keyframe_interval=4)
    encode_checkpoint(syn.checkpoint, syn.specs, cfg4)
    assert calls["n"] > 0


def _mlp_forward(t, x):
    import mcwc.nnops as nnops
    h = nnops.gelu(x @ t["w1"].astype(np.float64).T + t["b1"].astype(np.float64))
    return h @ t["w2"].astype(np.float64).T + t["b2"].astype(np.float64)


def test_blockspec_permutation_is_function_preserving(rng):
    # hidden-unit blocks spanning (w1 rows, b1, w2 columns): permuting the
    # extracted blocks and reassembling leaves the MLP mapping unchanged
    from mcwc.blocks import (BlockMember, BlockTypeSpec, apply_permutation,
                             assemble_layer, extract_blocks, random_permutation)
    hidden, din, dout = 12, 5, 4
    layer = LayerTensors(index=1, tensors={
        "w1": rng.standard_normal((hidden, din)).astype(np.float32),
        "b1": rng.standard_normal(hidden).astype(np.float32),
        "w2": rng.standard_normal((dout, hidden)).astype(np.float32),
        "b2": rng.standard_normal(dout).astype(np.float32),
    })
    spec = BlockTypeSpec(0, [BlockMember("w1", 0), BlockMember("b1", 0),
                             BlockMember("w2", 1)])
    bs = extract_blocks(layer, spec)
    perm = random_permutation(hidden, rng)
    permuted = apply_permutation(bs, perm)
    shapes = {k: v.shape for k, v in layer.tensors.items()}
    out = assemble_layer([permuted], [spec], {k: shapes[k] for k in ("w1", "b1", "w2")},
                         index=1)
    out.tensors["b2"] = layer.tensors["b2"]
    x = rng.standard_normal((30, din))
    y_ref = _mlp_forward(layer.tensors, x)
    y_perm = _mlp_forward(out.tensors, x)
    assert np.abs(y_ref - y_perm).max() < 1e-5


def test_blockspec_head_permutation_is_function_preserving(rng):
    # attention-head blocks spanning grouped q/k/v rows and o columns
    from mcwc.blocks import (BlockMember, BlockTypeSpec, apply_permutation,
                             assemble_layer, extract_blocks, random_permutation)
    from mcwc.diagnostics import _mha_forward
    h, dh = 4, 6
    dm = h * dh
    layer = LayerTensors(index=1, tensors={
        "wq": rng.standard_normal((dm, dm)).astype(np.float32),
        "wk": rng.standard_normal((dm, dm)).astype(np.float32),
        "wv": rng.standard_normal((dm, dm)).astype(np.float32),
        "wo": rng.standard_normal((dm, dm)).astype(np.float32),
    })
    spec = BlockTypeSpec(0, [BlockMember("wq", 0), BlockMember("wk", 0),
                             BlockMember("wv", 0), BlockMember("wo", 1)],
                         block_count=h)
    bs = extract_blocks(layer, spec)
    perm = random_permutation(h, rng)
    out = assemble_layer([apply_permutation(bs, perm)], [spec],
                         {k: (dm, dm) for k in ("wq", "wk", "wv", "wo")}, index=1)
    x = rng.standard_normal((9, dm))
    y_ref = _mha_forward(x, *(layer.tensors[k].astype(np.float64)
                              for k in ("wq", "wk", "wv", "wo")), h, dh)
    y_perm = _mha_forward(x, *(out.tensors[k].astype(np.float64)
                               for k in ("wq", "wk", "wv", "wo")), h, dh)
    assert np.abs(y_ref - y_perm).max() < 1e-4


def test_codec_alignment_adds_no_functional_error(rng):
    # an MLP-stack checkpoint with planted hidden permutations: decoded
    # forward error with alignment stays at quantization scale and never
    # exceeds the no-alignment pipeline's error
    from mcwc.blocks import BlockMember, BlockTypeSpec
    hidden, width = 10, 8
    layers = []
    w1 = rng.standard_normal((hidden, width)).astype(np.float32)
    b1 = rng.standard_normal(hidden).astype(np.float32)
    w2 = rng.standard_normal((width, hidden)).astype(np.float32)
    for li in range(1, 9):
        sigma = rng.permutation(hidden)
        layers.append(LayerTensors(index=li, tensors={
            "w1": w1[sigma].copy(), "b1": b1[sigma].copy(),
            "w2": w2[:, sigma].copy(),
        }))
        w1 = w1 + 0.02 * rng.standard_normal(w1.shape).astype(np.float32)
        b1 = b1 + 0.02 * rng.standard_normal(b1.shape).astype(np.float32)
        w2 = w2 + 0.02 * rng.standard_normal(w2.shape).astype(np.float32)
    ckpt = Checkpoint(arch_id=0, layers=layers)
    specs = [BlockTypeSpec(0, [BlockMember("w1", 0), BlockMember("b1", 0),
                               BlockMember("w2", 1)])]
    x = rng.standard_normal((25, width))

    def forward_err(flags):
        # blocks are 17-dim (w1 row + bias + w2 column): d_lat must cover them
        cfg = tiny_codec_config(d_lat=24, **flags)
        out = decode_checkpoint(encode_checkpoint(ckpt, specs, cfg))
        worst = 0.0
        scale = 0.0
        for orig, dec in zip(ckpt.layers, out.layers):
            t = dict(orig.tensors)
            t["b2"] = np.zeros(width, dtype=np.float32)
            d = dict(dec.tensors)
            d["b2"] = t["b2"]
            y_ref = _mlp_forward(t, x)
            worst = max(worst, float(np.abs(y_ref - _mlp_forward(d, x)).max()))
            scale = max(scale, float(np.abs(y_ref).max()))
        return worst / scale

    err_full = forward_err({})
    err_noalign = forward_err({"no_alignment": True})
    assert err_full < 0.05  # quantization-scale relative error only
    assert err_full <= err_noalign + 1e-6


def test_parallel_decode_k1_everything_keyframe():
    syn = make_synthetic_checkpoint(seed=6, n_layers=5, n_types=1, blocks=6,
                                    block_dim=8, with_bias=True)
    cfg = tiny_codec_config(keyframe_interval=1)
    data = encode_checkpoint(syn.checkpoint, syn.specs, cfg)
    assert segment_count(5, 1) == 5
    seq = decode_checkpoint(data)
    par = decode_segments_parallel(data, workers=8)
    assert checkpoints_bit_equal(seq, par)


def test_realized_code_bits_near_proxy_on_real_streams():
    # per-record symbol payloads stay within the coder-efficiency bound of the
    # ideal codelength recorded in the trailer (40 bits of overhead per stream)
    import mcwc.codec as codec_mod

    syn = make_synthetic_checkpoint(seed=12, n_layers=6, n_types=1, blocks=16,
                                    block_dim=64)  # >= 1000 symbols per record
    cfg = tiny_codec_config()
    data = encode_checkpoint(syn.checkpoint, syn.specs, cfg)
    pb = parse_header(data)
    pos = pb.records_start
    chain, decoded_prev = {}, {}
    payload_bits = 0
    n_records = 0
    for li, tid in pb.record_keys():
        spec = next(s for s in pb.specs if s.type_id == tid)
        rec, pos = codec_mod._walk_record(pb, pos, li, spec, chain, decoded_prev,
                                          decode_payloads=False)
        payload_bits += 8 * (rec.spans["codes"] - 4)  # minus the length prefix
        n_records += 1
    proxy = pb.trailer["proxy_bits_keyframe"] + pb.trailer["proxy_bits_residual"]
    assert payload_bits <= proxy + 40 * n_records


def test_encode_deterministic_across_processes(tmp_path):
    import subprocess
    import sys

    syn = make_synthetic_checkpoint(seed=8, n_layers=6, n_types=2, blocks=8,
                                    block_dim=12, with_bias=True)
    save_checkpoint(syn.checkpoint, tmp_path / "in.ckpt")
    script = (
        "import sys\n"
        "from mcwc.container import load_checkpoint\n"
        "from mcwc.codec import CodecConfig, encode_checkpoint\n"
        "from mcwc.blocks import BlockMember, BlockTypeSpec\n"
        "from mcwc.predictor import TrainConfig\n"
        "from mcwc.entropy import EntropyFitConfig\n"
        "ckpt = load_checkpoint(sys.argv[1])\n"
        "specs = [BlockTypeSpec(t, [BlockMember(f't{t}.w', 0)]) for t in (0, 1)]\n"
        "cfg = CodecConfig(keyframe_interval=4, d_lat=16, d_emb=8,\n"
        "    train=TrainConfig(steps=20, pred_phase_steps=15, warmup_steps=2, seed=0),\n"
        "    entropy_fit=EntropyFitConfig(steps=30, seed=0))\n"
        "open(sys.argv[2], 'wb').write(encode_checkpoint(ckpt, specs, cfg))\n"
    )
    for name in ("a.mcwc", "b.mcwc"):
        subprocess.run([sys.executable, "-c", script,
                        str(tmp_path / "in.ckpt"), str(tmp_path / name)],
                       check=True, cwd=tmp_path)
    assert (tmp_path / "a.mcwc").read_bytes() == (tmp_path / "b.mcwc").read_bytes()
