"""End-to-end encoder/decoder: keyframe scheduling, residual formation,
bitstream assembly/parsing, and exact rate accounting.

Bitstream layout (integers little-endian; exact grammar in docs/format.md):
    magic "MCWC" | version u16 | L u32 | K u32 | arch_id u32 | trailer_offset u64
    | meta_len u32 | meta JSON | model_len u32 | model region
    | records in traversal order (layers ascending, type ids ascending)
    | trailer_len u32 | trailer JSON

Each record: mode u8 | perm_flag u8 | perm_len u32 | perm payload
    | q_flag u8 | groups u32 | f32 steps [| f32 means] | codes_len u32 | payload
"""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import entropy as ent
from .align import AlignConfig, ActivationSummary, align_layer_pair, alignment_gain
from .blocks import (
    BlockMember,
    BlockSet,
    BlockTypeSpec,
    Permutation,
    apply_permutation,
    assemble_layer,
    extract_blocks,
    identity_permutation,
    invert_permutation,
    random_permutation,
)
from .container import Checkpoint, LayerTensors, param_count
from .errors import (
    BadMagic,
    BlockCountMismatch,
    CorruptStream,
    InvalidCheckpoint,
    McwcError,
    RecordCountMismatch,
    UnsupportedVersion,
)
from .permcode import (
    PermModelParams,
    delta_digits,
    encode_perm_stream,
    decode_perm_stream,
    fit_perm_model,
    fixed_length_perm_bytes,
    fixed_length_perm_decode,
    lehmer_decode,
    lehmer_encode,
    pack_bits,
    undelta_digits,
    unpack_bits,
)
from .predictor import (
    PredictorParams,
    TrainConfig,
    TypeSamples,
    init_predictor,
    predict_batch,
    train_predictor,
)
from .quant import QuantizerParams, clip_count, dequantize, init_quantizer, quantize
from .rangecoder import RangeDecoder, RangeEncoder, quantize_pmf

MAGIC = b"MCWC"
VERSION = 1
_FIXED_HEADER = struct.Struct("<4sHIIIQ")
log = logging.getLogger("mcwc.codec")


def keyframe_indicator(layer: int, k: int) -> int:
    """1 iff (layer - 1) mod K == 0; layers are 1-based."""
    if layer < 1 or k < 1:
        raise ValueError(f"layer and K must be positive, got layer={layer}, K={k}")
    return 1 if (layer - 1) % k == 0 else 0


@dataclass
class CodecConfig:
    keyframe_interval: int = 4
    lam: float = 1e-3
    gamma: float = 0.8
    q_max_residual: int = 127
    q_max_keyframe: int = 255
    learned_means: bool = False
    d_lat: int = 256
    d_emb: int = 64
    seed: int = 0
    align: AlignConfig = field(default_factory=AlignConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    entropy_fit: ent.EntropyFitConfig = field(default_factory=ent.EntropyFitConfig)
    align_recompute_period: int = 500
    gain_gating: bool = True
    # ablation switches
    no_alignment: bool = False
    random_alignment: bool = False
    no_predictor: bool = False
    fixed_length_codes: bool = False
    fixed_length_perms: bool = False
    residual_energy_alignment: bool = False
    delta_perm_coding: bool = True

    def __post_init__(self):
        if self.keyframe_interval < 1:
            raise ValueError("keyframe interval must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


# ---------------------------------------------------------------------------
# spec bookkeeping

RAW_AXIS = 0


def effective_specs(ckpt: Checkpoint, specs: list[BlockTypeSpec]) -> list[BlockTypeSpec]:
    """User specs plus auto-generated raw (B=1, keyframe-only) specs covering
    every tensor not claimed by a user spec."""
    specs = sorted(specs, key=lambda s: s.type_id)
    seen_ids = [s.type_id for s in specs]
    if len(set(seen_ids)) != len(seen_ids):
        raise InvalidCheckpoint(f"duplicate block type ids: {seen_ids}")
    covered: set[str] = set()
    for s in specs:
        for m in s.members:
            if m.tensor in covered:
                raise InvalidCheckpoint(f"tensor {m.tensor!r} claimed by multiple specs")
            covered.add(m.tensor)
    uncovered: set[str] = set()
    for layer in ckpt.layers:
        uncovered.update(name for name in layer.tensors if name not in covered)
    next_id = max(seen_ids, default=-1) + 1
    out = list(specs)
    for name in sorted(uncovered):
        out.append(BlockTypeSpec(type_id=next_id,
                                 members=[BlockMember(name, RAW_AXIS)],
                                 block_count=1, raw=True))
        next_id += 1
    return out


def block_geometry(spec: BlockTypeSpec, shapes: dict[str, tuple[int, ...]]):
    """(B, block dim, piece shapes) from declared shapes alone; mirrors extraction."""
    count = spec.block_count
    piece_shapes = []
    dim = 0
    for m in spec.members:
        shape = shapes[m.tensor]
        n = shape[m.axis]
        if count is None:
            count = n
        if n % count != 0:
            raise BlockCountMismatch(
                f"{m.tensor!r} axis {m.axis} length {n} not divisible by {count}")
        piece = list(shape)
        piece[m.axis] = n // count
        piece_shapes.append(tuple(piece))
        dim += int(np.prod(piece))
    return count, dim, piece_shapes


def _spec_present(spec: BlockTypeSpec, shapes: dict[str, tuple[int, ...]]) -> bool:
    return all(m.tensor in shapes for m in spec.members)


# ---------------------------------------------------------------------------
# encoding

@dataclass
class _RecordDraft:
    layer: int
    spec: BlockTypeSpec
    mode: int
    perm: Permutation
    perm_absolute: int
    perm_values: np.ndarray            # signed digits or deltas actually coded
    q: QuantizerParams
    codes: np.ndarray                  # (G, d) int32
    ctx: ent.SymbolContext
    clip: int
    recon: np.ndarray                  # (G, d) float32 decoded aligned blocks
    piece_shapes: list


@dataclass
class SideInfo:
    """Frozen side information from a previous bitstream, for re-encoding a
    decoded checkpoint onto the same quantized manifold."""

    perms: dict[tuple[int, int], Permutation]
    quantizers: dict[tuple[int, int], QuantizerParams]
    predictor: PredictorParams | None
    psi: ent.EntropyModelParams
    perm_model: PermModelParams


def _shapes_of(layer: LayerTensors) -> dict[str, tuple[int, ...]]:
    return {name: tuple(arr.shape) for name, arr in layer.tensors.items()}


def _alignment_pass(ckpt: Checkpoint, aligned_specs: list[BlockTypeSpec],
                    cfg: CodecConfig, activations: dict, rng: np.random.Generator,
                    side_info: SideInfo | None, predicted_fn=None):
    """Extract and align every (layer, type), chaining each layer against the
    previous aligned layer; returns (extracted, aligned, perms) keyed (layer, tid)."""
    extracted: dict[tuple[int, int], BlockSet] = {}
    aligned: dict[tuple[int, int], BlockSet] = {}
    perms: dict[tuple[int, int], Permutation] = {}
    last_present: dict[int, int] = {}
    gate_chain: dict[int, np.ndarray] = {}
    perm_defaults = PermModelParams()
    k_int = cfg.keyframe_interval

    def choose_perm(spec, layer_idx, ref, cand, predicted):
        if side_info is not None:
            return side_info.perms[(layer_idx, spec.type_id)]
        if cfg.no_alignment:
            return identity_permutation(cand.count)
        if cfg.random_alignment:
            return random_permutation(cand.count, rng)
        ref_act = cand_act = None
        key_prev = (layer_idx - 1, spec.type_id)
        key_cur = (layer_idx, spec.type_id)
        if key_prev in activations and key_cur in activations:
            ref_act = ActivationSummary(activations[key_prev])
            cand_act = ActivationSummary(activations[key_cur])
        perm, _ = align_layer_pair(ref, cand, ref_act, cand_act, cfg.align,
                                   predicted=predicted)
        if cfg.gain_gating and not perm.is_identity():
            saving = alignment_gain(ref.blocks.astype(np.float64),
                                    cand.blocks.astype(np.float64), perm, cfg.gamma)
            cost = _measured_perm_cost_bits(perm, spec.type_id, layer_idx, k_int,
                                            gate_chain, cfg, perm_defaults)
            if saving <= cost:
                perm = identity_permutation(cand.count)
        return perm

    for layer in ckpt.layers:
        li = layer.index
        for spec in aligned_specs:
            if not spec.present_in(layer):
                continue
            tid = spec.type_id
            cand = extract_blocks(layer, spec)
            extracted[(li, tid)] = cand
            fresh = last_present.get(tid) != li - 1
            if fresh:
                perm = identity_permutation(cand.count)
            else:
                ref = aligned[(li - 1, tid)]
                if ref.count != cand.count:
                    raise BlockCountMismatch(
                        f"type {tid} has {ref.count} blocks at layer {li - 1} "
                        f"but {cand.count} at layer {li}")
                predicted = predicted_fn(li, tid, ref) if predicted_fn else None
                perm = choose_perm(spec, li, ref, cand, predicted)
            perms[(li, tid)] = perm
            aligned[(li, tid)] = apply_permutation(cand, perm)
            gate_chain[tid] = lehmer_encode(perm)
            last_present[tid] = li
    return extracted, aligned, perms


def align_checkpoint(ckpt: Checkpoint, specs: list[BlockTypeSpec],
                     cfg: CodecConfig | None = None, activations=None):
    """Public alignment view: (extracted, aligned, perms) for diagnostics."""
    cfg = cfg or CodecConfig()
    all_specs = effective_specs(ckpt, specs)
    aligned_specs = [s for s in all_specs if not s.raw]
    rng = np.random.default_rng(cfg.seed)
    predicted_fn = None
    if cfg.residual_energy_alignment and not cfg.no_alignment and not cfg.random_alignment:
        predicted_fn = lambda li, tid, ref: ref
    return _alignment_pass(ckpt, aligned_specs, cfg, activations or {}, rng,
                           None, predicted_fn)


def encode_checkpoint(ckpt: Checkpoint, specs: list[BlockTypeSpec], cfg: CodecConfig,
                      activations: dict[tuple[int, int], np.ndarray] | None = None,
                      side_info: SideInfo | None = None,
                      return_reference: bool = False,
                      quantizer_override: dict[tuple[int, int], QuantizerParams] | None = None):
    """Produce a self-describing bitstream; deterministic for fixed inputs and seed.

    With return_reference=True also returns the encoder's internal decoded
    checkpoint (its own decode-loop output), which the decoder must reproduce
    f32-bit-exactly. quantizer_override pins selected records to externally
    supplied quantizers, for matched-rate comparisons across ablations.
    """
    ckpt.validate()
    all_specs = effective_specs(ckpt, specs)
    aligned_specs = [s for s in all_specs if not s.raw]
    k_int = cfg.keyframe_interval
    n_layers = ckpt.num_layers
    rng = np.random.default_rng(cfg.seed)
    activations = activations or {}

    # pass A: extract and align, chaining against the previous aligned layer
    copy_pred = None
    if cfg.residual_energy_alignment and not cfg.no_alignment and not cfg.random_alignment:
        copy_pred = lambda li, tid, ref: ref  # copy-last prediction before training
    extracted, aligned, perms = _alignment_pass(
        ckpt, aligned_specs, cfg, activations, rng, side_info, copy_pred)

    # train the predictor on aligned non-keyframe targets
    type_dims = {}
    for spec in aligned_specs:
        for layer in ckpt.layers:
            if spec.present_in(layer):
                _, dim, _ = block_geometry(spec, _shapes_of(layer))
                type_dims[spec.type_id] = dim
                break
    wide = {t: d for t, d in type_dims.items() if d > cfg.d_lat}
    if wide and not cfg.no_predictor:
        log.warning("block dim exceeds predictor latent width for types %s; "
                    "prediction falls back to a least-squares projection", wide)
    all_type_ids = sorted(s.type_id for s in all_specs)

    def build_samples():
        samples = []
        for spec in aligned_specs:
            tid = spec.type_id
            ctxs, tgts, rows = [], [], []
            for li in range(2, n_layers + 1):
                if keyframe_indicator(li, k_int):
                    continue
                if (li, tid) in aligned and (li - 1, tid) in aligned:
                    ctxs.append(aligned[(li - 1, tid)].blocks.astype(np.float64))
                    tgts.append(aligned[(li, tid)].blocks.astype(np.float64))
                    rows.append(np.full(aligned[(li, tid)].count, li - 1, dtype=np.int64))
            if not ctxs:
                continue
            c = np.concatenate(ctxs)
            t = np.concatenate(tgts)
            r = t - c
            steps = np.maximum(cfg.gamma * r.std(axis=1), 1e-8)
            samples.append(TypeSamples(tid, c, t, np.concatenate(rows), steps))
        return samples

    predictor = None
    psi64 = None
    history: list[float] = []
    samples = build_samples()
    has_predictive = any(s.target.size for s in samples)
    ctx_dim = 2 * cfg.d_emb + ent.N_FEATURES
    if side_info is not None:
        predictor = side_info.predictor
        psi32 = side_info.psi
    else:
        predictor64 = init_predictor(n_layers, all_type_ids, type_dims,
                                     d_lat=cfg.d_lat, d_emb=cfg.d_emb, seed=cfg.seed)
        psi64 = ent.EntropyModelParams.init(ctx_dim, np.random.default_rng(cfg.seed + 1))
        if has_predictive and not cfg.no_predictor and cfg.train.steps > 0:
            predictor64, psi64, history = train_predictor(
                predictor64, samples, cfg.train, lam=cfg.lam, psi=psi64,
                q_max=cfg.q_max_residual)
            if cfg.residual_energy_alignment and cfg.align_recompute_period <= cfg.train.steps:
                # recompute permutations under the trained predictor, then refit
                def trained_pred(li, tid, ref):
                    if tid not in predictor64.type_dims:
                        return ref
                    out = predict_batch(ref.blocks.astype(predictor64.arrays["core.w1"].dtype),
                                        li, tid, predictor64)
                    return BlockSet(layer=li, type_id=tid,
                                    blocks=np.asarray(out), piece_shapes=ref.piece_shapes)
                extracted, aligned, perms = _alignment_pass(
                    ckpt, aligned_specs, cfg, activations, rng, side_info, trained_pred)
                samples = build_samples()
                tune = replace(cfg.train, steps=max(cfg.train.steps // 4, 1),
                               pred_phase_steps=max(cfg.train.steps // 8, 1))
                predictor64, psi64, extra = train_predictor(
                    predictor64, samples, tune, lam=cfg.lam, psi=psi64,
                    q_max=cfg.q_max_residual)
                history = history + extra
        predictor = predictor64.published()
        psi32 = None  # refit below on real codes

    predictor_present = has_predictive and not cfg.no_predictor and predictor is not None

    # pass B: quantize in decode-loop order so encoder context == decoder context
    drafts: list[_RecordDraft] = []
    decoded_prev: dict[int, np.ndarray] = {}
    chain_digits: dict[int, np.ndarray] = {}
    last_coded: dict[int, int] = {}
    perm_samples: dict[int, list[np.ndarray]] = {}
    for layer in ckpt.layers:
        li = layer.index
        shapes = _shapes_of(layer)
        kf = keyframe_indicator(li, k_int)
        for spec in all_specs:
            if not _spec_present(spec, shapes):
                continue
            tid = spec.type_id
            if spec.raw:
                bs = extract_blocks(layer, spec)
                perm = identity_permutation(bs.count)
            else:
                bs = aligned[(li, tid)]
                perm = perms[(li, tid)]
            fresh = spec.raw or last_coded.get(tid) != li - 1
            mode = 1 if (kf or fresh) else 0
            digits = lehmer_encode(perm)
            reset = kf or fresh or not cfg.delta_perm_coding or \
                tid not in chain_digits or len(chain_digits[tid]) != len(digits)
            if reset:
                values, absolute = digits, 1
            else:
                values, absolute = delta_digits(digits, chain_digits[tid]), 0
            chain_digits[tid] = digits
            perm_samples.setdefault(tid, []).append(values)

            def pick_quantizer(data, q_max, spread):
                if side_info is not None:
                    return side_info.quantizers[(li, tid)]
                if quantizer_override and (li, tid) in quantizer_override:
                    return quantizer_override[(li, tid)]
                return init_quantizer(data, cfg.gamma, q_max,
                                      learned_means=cfg.learned_means, spread=spread)

            if mode == 1:
                vals = bs.blocks
                q = pick_quantizer(vals.astype(np.float64), cfg.q_max_keyframe, "range")
                codes = quantize(vals.astype(np.float64), q)
                clip = clip_count(vals.astype(np.float64), q)
                recon = dequantize(codes, q)
                ctx = ent.build_context(li, tid, q.steps, None, keyframe=True)
            else:
                prev = decoded_prev[tid]
                if predictor_present:
                    pred = predict_batch(prev, li, tid, predictor)
                else:
                    pred = prev
                resid = bs.blocks.astype(np.float32) - pred
                q = pick_quantizer(resid.astype(np.float64), cfg.q_max_residual, "std")
                codes = quantize(resid.astype(np.float64), q)
                clip = clip_count(resid.astype(np.float64), q)
                recon = (pred + dequantize(codes, q)).astype(np.float32)
                ctx = ent.build_context(li, tid, q.steps, pred, keyframe=False)
            if not spec.raw:
                last_coded[tid] = li
                decoded_prev[tid] = recon
            drafts.append(_RecordDraft(layer=li, spec=spec, mode=mode, perm=perm,
                                       perm_absolute=absolute, perm_values=values,
                                       q=q, codes=codes, ctx=ctx, clip=clip,
                                       recon=recon, piece_shapes=bs.piece_shapes))

    # fit the entropy and permutation models on what will actually be coded
    if side_info is not None:
        perm_model = side_info.perm_model
    else:
        perm_model = fit_perm_model(perm_samples)
    emb_layer = predictor.arrays["emb.layer"]
    emb_type = predictor.arrays["emb.type"]
    if side_info is None and not cfg.fixed_length_codes:
        sym_list, gi_list, ctx_rows, qmax_rows = [], [], [], []
        g_base = 0
        for d in drafts:
            g = d.codes.shape[0]
            sym_list.append(d.codes.ravel())
            gi_list.append(np.repeat(np.arange(g_base, g_base + g), d.codes.shape[1]))
            trow = predictor.type_row(d.spec.type_id)
            ctx_rows.append(ent.context_matrix(emb_layer[d.layer - 1], emb_type[trow],
                                               d.ctx.features))
            qmax_rows.append(np.full(g, d.q.q_max, dtype=np.int64))
            g_base += g
        psi64_fit, _ = ent.fit_entropy_model(
            np.concatenate(sym_list), np.concatenate(gi_list),
            np.concatenate(ctx_rows), np.concatenate(qmax_rows),
            cfg.entropy_fit, psi=psi64)
        psi32 = psi64_fit.published()
    elif side_info is None:
        psi32 = (psi64 or ent.EntropyModelParams.init(ctx_dim,
                 np.random.default_rng(cfg.seed + 1))).published()

    # pass C: serialize
    meta = _build_meta(ckpt, all_specs, cfg, predictor_present, perm_model)
    psi_out = ent.EntropyModelParams(ctx_dim, {}) if cfg.fixed_length_codes else psi32
    model_blob = _serialize_model_region(predictor, psi_out, perm_model, predictor_present)
    record_blobs = []
    clip_counts = []
    proxy_kf = proxy_res = 0.0
    for d in drafts:
        blob, proxy = _serialize_record(d, cfg, perm_model, psi32,
                                        emb_layer, emb_type, predictor)
        record_blobs.append(blob)
        clip_counts.append(d.clip)
        if d.mode == 1:
            proxy_kf += proxy
        else:
            proxy_res += proxy
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    head_len = _FIXED_HEADER.size + 4 + len(meta_bytes) + 4 + len(model_blob)
    offsets = []
    pos = head_len
    for blob in record_blobs:
        offsets.append(pos)
        pos += len(blob)
    trailer_offset = pos
    trailer = {
        "record_offsets": offsets,
        "record_lengths": [len(b) for b in record_blobs],
        "record_keys": [[d.layer, d.spec.type_id] for d in drafts],
        "clip_counts": clip_counts,
        "overflow_total": int(sum(clip_counts)),
        "proxy_bits_keyframe": round(proxy_kf, 3),
        "proxy_bits_residual": round(proxy_res, 3),
    }
    trailer_bytes = json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += _FIXED_HEADER.pack(MAGIC, VERSION, ckpt.num_layers, k_int,
                              ckpt.arch_id & 0xFFFFFFFF, trailer_offset)
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(model_blob)) + model_blob
    for blob in record_blobs:
        out += blob
    out += struct.pack("<I", len(trailer_bytes)) + trailer_bytes
    if not return_reference:
        return bytes(out)

    # assemble the encoder-side reference exactly the way the decoder will
    by_layer: dict[int, list] = {}
    for d in drafts:
        canonical = apply_permutation(
            BlockSet(layer=d.layer, type_id=d.spec.type_id, blocks=d.recon,
                     piece_shapes=d.piece_shapes),
            invert_permutation(d.perm))
        by_layer.setdefault(d.layer, []).append((d.spec, canonical))
    ref_layers = []
    for layer in ckpt.layers:
        entries = by_layer[layer.index]
        ref_layers.append(assemble_layer([c for _, c in entries],
                                         [s for s, _ in entries],
                                         _shapes_of(layer), index=layer.index))
    reference = Checkpoint(arch_id=ckpt.arch_id, layers=ref_layers)
    return bytes(out), reference


def _measured_perm_cost_bits(perm: Permutation, tid: int, layer: int, k_int: int,
                             gate_chain: dict[int, np.ndarray], cfg: CodecConfig,
                             params: PermModelParams) -> float:
    """Bits this permutation would cost in the current chain state, under the
    default (unfitted) digit model."""
    digits = lehmer_encode(perm)
    prev = gate_chain.get(tid)
    reset = keyframe_indicator(layer, k_int) or prev is None or \
        len(prev) != len(digits) or not cfg.delta_perm_coding
    values = digits if reset else delta_digits(digits, prev)
    enc = RangeEncoder()
    encode_perm_stream(values, tid, params, enc)
    return 8.0 * len(enc.finish())


def _build_meta(ckpt: Checkpoint, all_specs, cfg: CodecConfig,
                predictor_present: bool, perm_model: PermModelParams) -> dict:
    shapes = [
        {"index": layer.index,
         "tensors": [[name, list(layer.tensors[name].shape)] for name in sorted(layer.tensors)]}
        for layer in ckpt.layers
    ]
    type_dims = {}
    for spec in all_specs:
        if spec.raw:
            continue
        for layer in ckpt.layers:
            if spec.present_in(layer):
                _, dim, _ = block_geometry(spec, _shapes_of(layer))
                type_dims[str(spec.type_id)] = dim
                break
    return {
        "param_shapes": shapes,
        "block_specs": [s.to_json() for s in all_specs],
        "flags": {
            "no_predictor": cfg.no_predictor,
            "predictor_present": predictor_present,
            "fixed_length_codes": cfg.fixed_length_codes,
            "fixed_length_perms": cfg.fixed_length_perms,
            "delta_perm_coding": cfg.delta_perm_coding,
            "learned_means": cfg.learned_means,
        },
        "quant": {"gamma": cfg.gamma, "q_max_residual": cfg.q_max_residual,
                  "q_max_keyframe": cfg.q_max_keyframe},
        "entropy": {"model_id": 1, "cdf_bits": 16, "p_min_exp": -16,
                    "hidden": ent.HIDDEN},
        "predictor": {"d_lat": cfg.d_lat, "d_emb": cfg.d_emb,
                      "type_dims": type_dims},
        "perm_model": {"threshold": perm_model.threshold,
                       "types": sorted(perm_model.scales)},
    }


def _serialize_model_region(predictor: PredictorParams, psi: ent.EntropyModelParams,
                            perm_model: PermModelParams, predictor_present: bool) -> bytes:
    arrays: list[tuple[str, np.ndarray, str]] = []
    for key in ("emb.layer", "emb.type"):
        arrays.append((key, predictor.arrays[key].astype("<f4"), "f4"))
    if predictor_present:
        for key in sorted(predictor.arrays):
            if key in ("emb.layer", "emb.type"):
                continue
            arrays.append((key, predictor.arrays[key].astype("<f4"), "f4"))
    for key in sorted(psi.arrays):
        arrays.append((key, psi.arrays[key].astype("<f4"), "f4"))
    for tid, scales in sorted(perm_model.scales.items()):
        arrays.append((f"perm.scales.{tid}", np.asarray(scales, dtype="<f2"), "f2"))
    blob = bytearray(struct.pack("<I", len(arrays)))
    for name, arr, dtype in arrays:
        nb = name.encode()
        blob += struct.pack("<H", len(nb)) + nb
        blob += bytes([0 if dtype == "f4" else 1, arr.ndim])
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes()
    return bytes(blob)


def _parse_model_region(blob: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    pos = 0
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        dtype_code, ndim = blob[pos], blob[pos + 1]
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        dtype = "<f4" if dtype_code == 0 else "<f2"
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * (4 if dtype_code == 0 else 2)
        arr = np.frombuffer(blob[pos:pos + nbytes], dtype=dtype).reshape(shape)
        pos += nbytes
        out[name] = arr.astype(np.float32) if dtype_code == 0 else arr.astype(np.float64)
    return out


def _record_cdfs(psi: ent.EntropyModelParams, emb_l_row: np.ndarray,
                 emb_t_row: np.ndarray, features: np.ndarray, q_max: int) -> list:
    ctx = ent.context_matrix(emb_l_row, emb_t_row, features)
    alpha, beta = ent.eval_params(psi, ctx)
    tables = ent.pmf_table(alpha, beta, q_max)
    return [quantize_pmf(row) for row in tables]


def _serialize_record(d: _RecordDraft, cfg: CodecConfig, perm_model: PermModelParams,
                      psi: ent.EntropyModelParams, emb_layer: np.ndarray,
                      emb_type: np.ndarray,
                      predictor: PredictorParams) -> tuple[bytes, float]:
    """Returns (record bytes, ideal codelength of the symbol payload in bits)."""
    blob = bytearray([d.mode])
    if cfg.fixed_length_perms:
        payload = fixed_length_perm_bytes(d.perm)
        flag = 1
    else:
        enc = RangeEncoder()
        encode_perm_stream(d.perm_values, d.spec.type_id, perm_model, enc)
        payload = enc.finish()
        flag = d.perm_absolute
    blob += bytes([flag]) + struct.pack("<I", len(payload)) + payload
    qflag = 1 if cfg.learned_means else 0
    blob += bytes([qflag]) + struct.pack("<I", d.q.groups)
    blob += d.q.steps.astype("<f4").tobytes()
    if qflag & 1:
        blob += d.q.means.astype("<f4").tobytes()
    if cfg.fixed_length_codes:
        width = math.ceil(math.log2(2 * d.q.q_max + 1))
        payload = pack_bits(d.codes.ravel() + d.q.q_max, width)
        proxy_bits = float(width * d.codes.size)
    else:
        trow = predictor.type_row(d.spec.type_id)
        alpha, beta = ent.eval_params(psi, ent.context_matrix(
            emb_layer[d.layer - 1], emb_type[trow], d.ctx.features))
        tables = ent.pmf_table(alpha, beta, d.q.q_max)
        gi = np.repeat(np.arange(d.codes.shape[0]), d.codes.shape[1])
        proxy_bits = ent.codelength_proxy(d.codes.ravel(), gi, tables, d.q.q_max)
        enc = RangeEncoder()
        for g in range(d.codes.shape[0]):
            cdf = quantize_pmf(tables[g])
            syms = d.codes[g].astype(np.int64) + d.q.q_max
            cums = cdf[syms]
            freqs = cdf[syms + 1] - cums
            enc.encode_many(cums.tolist(), freqs.tolist())
        payload = enc.finish()
    blob += struct.pack("<I", len(payload)) + payload
    return bytes(blob), proxy_bits


# ---------------------------------------------------------------------------
# parsing and decoding

@dataclass
class ParsedBitstream:
    data: bytes
    n_layers: int
    keyframe_interval: int
    arch_id: int
    meta: dict
    specs: list[BlockTypeSpec]
    layer_shapes: list[dict[str, tuple[int, ...]]]
    predictor: PredictorParams
    psi: ent.EntropyModelParams
    perm_model: PermModelParams
    records_start: int
    trailer_offset: int
    trailer: dict

    @property
    def flags(self) -> dict:
        return self.meta["flags"]

    def record_keys(self) -> list[tuple[int, int]]:
        keys = []
        for li in range(1, self.n_layers + 1):
            shapes = self.layer_shapes[li - 1]
            for spec in self.specs:
                if _spec_present(spec, shapes):
                    keys.append((li, spec.type_id))
        return keys

    def param_count(self) -> int:
        return int(sum(int(np.prod(shape)) for shapes in self.layer_shapes
                       for shape in shapes.values()))


def parse_header(data: bytes) -> ParsedBitstream:
    if len(data) < _FIXED_HEADER.size:
        raise CorruptStream("bitstream shorter than the fixed header")
    magic, version, n_layers, k_int, arch_id, trailer_offset = \
        _FIXED_HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported bitstream version {version}")
    pos = _FIXED_HEADER.size
    try:
        (meta_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos:pos + meta_len].decode())
        pos += meta_len
        (model_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = _parse_model_region(data[pos:pos + model_len])
        pos += model_len
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptStream(f"header does not parse: {exc}") from exc
    records_start = pos
    if trailer_offset < records_start or trailer_offset + 4 > len(data):
        raise CorruptStream("trailer offset points outside the file")
    (trailer_len,) = struct.unpack_from("<I", data, trailer_offset)
    tpos = trailer_offset + 4
    try:
        trailer = json.loads(data[tpos:tpos + trailer_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptStream(f"trailer does not parse: {exc}") from exc
    if tpos + trailer_len != len(data):
        raise CorruptStream("file does not end at the trailer boundary")

    specs = [BlockTypeSpec.from_json(s) for s in meta["block_specs"]]
    layer_shapes = []
    for entry in meta["param_shapes"]:
        layer_shapes.append({name: tuple(shape) for name, shape in entry["tensors"]})
    type_dims = {int(t): int(d) for t, d in meta["predictor"].get("type_dims", {}).items()}
    predictor = PredictorParams(
        n_layers=n_layers, d_lat=int(meta["predictor"]["d_lat"]),
        d_emb=int(meta["predictor"]["d_emb"]),
        type_ids=sorted(s.type_id for s in specs), type_dims=type_dims,
        arrays={k: v for k, v in arrays.items() if not k.startswith(("ent.", "perm."))})
    psi = ent.EntropyModelParams(
        ctx_dim=2 * int(meta["predictor"]["d_emb"]) + ent.N_FEATURES,
        arrays={k: v for k, v in arrays.items() if k.startswith("ent.")})
    scales = {}
    for key, val in arrays.items():
        if key.startswith("perm.scales."):
            scales[int(key.rsplit(".", 1)[1])] = np.maximum(val.astype(np.float64), 1e-3)
    perm_model = PermModelParams(scales=scales,
                                 threshold=int(meta["perm_model"]["threshold"]))
    return ParsedBitstream(data=data, n_layers=n_layers, keyframe_interval=k_int,
                           arch_id=arch_id, meta=meta, specs=specs,
                           layer_shapes=layer_shapes, predictor=predictor, psi=psi,
                           perm_model=perm_model, records_start=records_start,
                           trailer_offset=trailer_offset, trailer=trailer)


def write_header(pb: ParsedBitstream) -> bytes:
    """Re-serialize the header region from parsed fields; byte-identical to the
    original for any stream this codec produced."""
    meta_bytes = json.dumps(pb.meta, sort_keys=True, separators=(",", ":")).encode()
    model_blob = _serialize_model_region(pb.predictor, pb.psi, pb.perm_model,
                                         pb.flags["predictor_present"])
    out = bytearray()
    out += _FIXED_HEADER.pack(MAGIC, VERSION, pb.n_layers, pb.keyframe_interval,
                              pb.arch_id & 0xFFFFFFFF, pb.trailer_offset)
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(model_blob)) + model_blob
    return bytes(out)


@dataclass
class _DecodedRecord:
    layer: int
    spec: BlockTypeSpec
    mode: int
    perm: Permutation
    q: QuantizerParams
    recon: np.ndarray
    piece_shapes: list
    n_symbols: int
    spans: dict[str, int]  # byte widths per category for rate accounting


def _walk_record(pb: ParsedBitstream, pos: int, li: int, spec: BlockTypeSpec,
                 chain: dict[int, np.ndarray], decoded_prev: dict[int, np.ndarray],
                 decode_payloads: bool = True) -> tuple[_DecodedRecord, int]:
    data = pb.data
    flags = pb.flags
    key = f"(layer {li}, type {spec.type_id})"
    try:
        mode = data[pos]
        perm_flag = data[pos + 1]
        (perm_len,) = struct.unpack_from("<I", data, pos + 2)
        pos2 = pos + 6
        perm_payload = data[pos2:pos2 + perm_len]
        if len(perm_payload) != perm_len:
            raise CorruptStream(f"truncated permutation payload at {key}")
        pos2 += perm_len
        qflag = data[pos2]
        (groups,) = struct.unpack_from("<I", data, pos2 + 1)
        pos2 += 5
        steps = np.frombuffer(data[pos2:pos2 + 4 * groups], dtype="<f4")
        if len(steps) != groups:
            raise CorruptStream(f"truncated quantizer info at {key}")
        pos2 += 4 * groups
        if qflag & 1:
            means = np.frombuffer(data[pos2:pos2 + 4 * groups], dtype="<f4")
            pos2 += 4 * groups
        else:
            means = np.zeros(groups, dtype=np.float32)
        (codes_len,) = struct.unpack_from("<I", data, pos2)
        pos2 += 4
        codes_payload = data[pos2:pos2 + codes_len]
        if len(codes_payload) != codes_len:
            raise CorruptStream(f"truncated symbol payload at {key}")
        pos2 += codes_len
    except (IndexError, struct.error) as exc:
        raise CorruptStream(f"truncated record at {key}") from exc

    if mode not in (0, 1):
        raise CorruptStream(f"invalid mode {mode} at {key}")
    shapes = pb.layer_shapes[li - 1]
    b, dim, piece_shapes = block_geometry(spec, shapes)
    if groups != b:
        raise CorruptStream(f"quantizer group count {groups} != block count {b} at {key}")

    tid = spec.type_id
    try:
        if flags["fixed_length_perms"]:
            perm = fixed_length_perm_decode(perm_payload, b)
            chain[tid] = lehmer_encode(perm)
        else:
            dec = RangeDecoder(perm_payload)
            values = decode_perm_stream(b, tid, pb.perm_model, dec)
            if perm_flag == 1:
                digits = values
            else:
                prev = chain.get(tid)
                if prev is None or len(prev) != b:
                    raise CorruptStream(f"delta permutation without chain state at {key}")
                digits = undelta_digits(prev, values)
            perm = lehmer_decode(digits)
            chain[tid] = digits
    except CorruptStream:
        raise
    except McwcError as exc:
        raise CorruptStream(f"invalid permutation stream at {key}: {exc}") from exc

    q_max = pb.meta["quant"]["q_max_keyframe"] if mode == 1 else \
        pb.meta["quant"]["q_max_residual"]
    q = QuantizerParams(steps=steps.copy(), means=means.copy(), q_max=int(q_max))

    recon = np.empty((b, dim), dtype=np.float32)
    if decode_payloads:
        if mode == 0:
            prev_dec = decoded_prev.get(tid)
            if prev_dec is None:
                raise CorruptStream(f"predictive record without context at {key}")
            if flags["predictor_present"]:
                pred = predict_batch(prev_dec, li, tid, pb.predictor)
            else:
                pred = prev_dec
            ctx = ent.build_context(li, tid, q.steps, pred, keyframe=False)
        else:
            pred = None
            ctx = ent.build_context(li, tid, q.steps, None, keyframe=True)
        if flags["fixed_length_codes"]:
            width = math.ceil(math.log2(2 * q.q_max + 1))
            vals = unpack_bits(codes_payload, width, b * dim) - q.q_max
            codes = vals.reshape(b, dim).astype(np.int32)
        else:
            trow = pb.predictor.type_row(tid)
            cdfs = _record_cdfs(pb.psi, pb.predictor.arrays["emb.layer"][li - 1],
                                pb.predictor.arrays["emb.type"][trow],
                                ctx.features, q.q_max)
            dec = RangeDecoder(codes_payload)
            codes = np.empty((b, dim), dtype=np.int32)
            for g in range(b):
                codes[g] = dec.decode_many_shared(cdfs[g].tolist(), dim)
            codes -= q.q_max
        if np.any(np.abs(codes) > q.q_max):
            raise CorruptStream(f"decoded codes outside clip range at {key}")
        deq = dequantize(codes, q)
        recon = deq if mode == 1 else (pred + deq).astype(np.float32)
        if not spec.raw:
            decoded_prev[tid] = recon

    spans = {
        "mode": 1,
        "perm": 1 + 4 + perm_len,
        "qparam": 1 + 4 + 4 * groups * (2 if qflag & 1 else 1),
        "codes": 4 + codes_len,
    }
    rec = _DecodedRecord(layer=li, spec=spec, mode=mode, perm=perm, q=q,
                         recon=recon, piece_shapes=piece_shapes,
                         n_symbols=b * dim, spans=spans)
    return rec, pos2


def _decode_layer_range(pb: ParsedBitstream, lo: int, hi: int,
                        start_pos: int) -> list[LayerTensors]:
    """Decode layers lo..hi (inclusive); lo must start a keyframe segment."""
    chain: dict[int, np.ndarray] = {}
    decoded_prev: dict[int, np.ndarray] = {}
    pos = start_pos
    layers = []
    for li in range(lo, hi + 1):
        shapes = pb.layer_shapes[li - 1]
        sets = []
        specs_here = []
        for spec in pb.specs:
            if not _spec_present(spec, shapes):
                continue
            rec, pos = _walk_record(pb, pos, li, spec, chain, decoded_prev)
            canonical = apply_permutation(
                BlockSet(layer=li, type_id=spec.type_id, blocks=rec.recon,
                         piece_shapes=rec.piece_shapes),
                invert_permutation(rec.perm))
            sets.append(canonical)
            specs_here.append(spec)
        layers.append(assemble_layer(sets, specs_here, shapes, index=li))
    return layers


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Reconstruct the checkpoint; bit-identical across runs and worker counts."""
    pb = parse_header(data)
    expected = pb.record_keys()
    tkeys = [tuple(k) for k in pb.trailer.get("record_keys", [])]
    if tkeys and tkeys != expected:
        raise RecordCountMismatch(
            f"trailer lists {len(tkeys)} records, grammar expects {len(expected)}")
    layers = _decode_layer_range(pb, 1, pb.n_layers, pb.records_start)
    ckpt = Checkpoint(arch_id=pb.arch_id, layers=layers)
    ckpt.validate()
    return ckpt


def decode_segments_parallel(data: bytes, workers: int = 1) -> Checkpoint:
    """Segment-parallel decode: ceil(L/K) independently decodable segments."""
    pb = parse_header(data)
    k_int = pb.keyframe_interval
    n_seg = math.ceil(pb.n_layers / k_int)
    keys = pb.record_keys()
    offsets = pb.trailer["record_offsets"]
    if len(offsets) != len(keys):
        raise RecordCountMismatch(
            f"trailer has {len(offsets)} offsets for {len(keys)} records")
    first_record_of_layer = {}
    for (li, _), off in zip(keys, offsets):
        first_record_of_layer.setdefault(li, off)

    def job(s):
        lo = (s - 1) * k_int + 1
        hi = min(s * k_int, pb.n_layers)
        return _decode_layer_range(pb, lo, hi, first_record_of_layer[lo])

    if workers <= 1:
        segments = [job(s) for s in range(1, n_seg + 1)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            segments = list(pool.map(job, range(1, n_seg + 1)))
    layers = [layer for seg in segments for layer in seg]
    ckpt = Checkpoint(arch_id=pb.arch_id, layers=layers)
    ckpt.validate()
    return ckpt


def segment_count(n_layers: int, k_int: int) -> int:
    return math.ceil(n_layers / k_int)


# ---------------------------------------------------------------------------
# rate accounting

@dataclass
class RateBreakdown:
    keyframe_code_bits: int
    residual_code_bits: int
    perm_bits: int
    qparam_bits: int
    meta_bits: int
    model_bits: int  # sub-line of meta: serialized predictor/entropy/perm models
    total_bits: int
    bits_per_param: float

    def components(self) -> dict[str, int]:
        return {
            "keyframe_codes": self.keyframe_code_bits,
            "residual_codes": self.residual_code_bits,
            "permutation_side_info": self.perm_bits,
            "quantizer_side_info": self.qparam_bits,
            "meta": self.meta_bits,
        }

    def fractions_percent(self, ndigits: int = 1) -> dict[str, float]:
        return component_fractions(self.components(), ndigits)


def component_fractions(components: dict[str, int], ndigits: int = 1) -> dict[str, float]:
    total = sum(components.values())
    return {k: round(100.0 * v / total, ndigits) for k, v in components.items()}


def rate_report(data: bytes) -> RateBreakdown:
    """Exact per-component bit accounting; components sum to 8x file bytes."""
    pb = parse_header(data)
    model_len = struct.unpack_from(
        "<I", data, _FIXED_HEADER.size + 4 +
        struct.unpack_from("<I", data, _FIXED_HEADER.size)[0])[0]
    kf_bits = res_bits = perm_bits = qparam_bits = 0
    mode_bytes = 0
    pos = pb.records_start
    chain: dict[int, np.ndarray] = {}
    decoded_prev: dict[int, np.ndarray] = {}
    for li, tid in pb.record_keys():
        spec = next(s for s in pb.specs if s.type_id == tid)
        rec, pos = _walk_record(pb, pos, li, spec, chain, decoded_prev,
                                decode_payloads=False)
        mode_bytes += rec.spans["mode"]
        perm_bits += 8 * rec.spans["perm"]
        qparam_bits += 8 * rec.spans["qparam"]
        if rec.mode == 1:
            kf_bits += 8 * rec.spans["codes"]
        else:
            res_bits += 8 * rec.spans["codes"]
    if pos != pb.trailer_offset:
        raise CorruptStream(
            f"records end at byte {pos} but trailer starts at {pb.trailer_offset}")
    total_bits = 8 * len(data)
    meta_bits = total_bits - kf_bits - res_bits - perm_bits - qparam_bits
    return RateBreakdown(
        keyframe_code_bits=kf_bits, residual_code_bits=res_bits,
        perm_bits=perm_bits, qparam_bits=qparam_bits, meta_bits=meta_bits,
        model_bits=8 * model_len, total_bits=total_bits,
        bits_per_param=total_bits / pb.param_count())


def export_model_arrays(data: bytes) -> dict[str, np.ndarray]:
    """Standalone view of the serialized model region (predictor, entropy
    model, permutation scales) for offline inspection."""
    pb = parse_header(data)
    out = dict(pb.predictor.arrays)
    out.update(pb.psi.arrays)
    for tid, scales in pb.perm_model.scales.items():
        out[f"perm.scales.{tid}"] = np.asarray(scales)
    return out


def extract_side_info(data: bytes) -> SideInfo:
    """Collect the frozen side information of an existing bitstream so a decoded
    checkpoint can be re-encoded onto the same quantized manifold."""
    pb = parse_header(data)
    perms: dict[tuple[int, int], Permutation] = {}
    quantizers: dict[tuple[int, int], QuantizerParams] = {}
    pos = pb.records_start
    chain: dict[int, np.ndarray] = {}
    decoded_prev: dict[int, np.ndarray] = {}
    for li, tid in pb.record_keys():
        spec = next(s for s in pb.specs if s.type_id == tid)
        rec, pos = _walk_record(pb, pos, li, spec, chain, decoded_prev,
                                decode_payloads=False)
        perms[(li, tid)] = rec.perm
        quantizers[(li, tid)] = rec.q
    return SideInfo(perms=perms, quantizers=quantizers, predictor=pb.predictor,
                    psi=pb.psi, perm_model=pb.perm_model)


# ---------------------------------------------------------------------------
# operating points

def reconstruction_mse(a: Checkpoint, b: Checkpoint) -> float:
    num = 0.0
    den = 0
    for la, lb in zip(a.layers, b.layers):
        for name in la.tensors:
            diff = la.tensors[name].astype(np.float64) - lb.tensors[name].astype(np.float64)
            num += float((diff * diff).sum())
            den += diff.size
    return num / den


def select_operating_point(ckpt: Checkpoint, specs: list[BlockTypeSpec],
                           cfg: CodecConfig, lambdas: list[float],
                           target_bits_per_param: float | None = None,
                           activations=None):
    """Sweep lambda, then pick min distortion subject to the realized total
    bits/param budget (or the smallest stream if nothing fits)."""
    results = []
    for lam in lambdas:
        cfg_l = replace(cfg, lam=lam)
        data = encode_checkpoint(ckpt, specs, cfg_l, activations=activations)
        report = rate_report(data)
        mse = reconstruction_mse(ckpt, decode_checkpoint(data))
        results.append({"lambda": lam, "bitstream": data, "report": report, "mse": mse})
    if target_bits_per_param is None:
        chosen = min(results, key=lambda r: r["mse"])
    else:
        fitting = [r for r in results if r["report"].bits_per_param <= target_bits_per_param]
        if fitting:
            chosen = min(fitting, key=lambda r: r["mse"])
        else:
            chosen = min(results, key=lambda r: r["report"].bits_per_param)
    return chosen, results
