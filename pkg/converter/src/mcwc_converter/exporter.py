"""Export framework checkpoints into the portable container format with a
generated block-spec document.

v1 supports standard MHA + FFN decoder blocks. Restricted-symmetry families
are rejected by name so the caller learns which scope category applies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .container_io import write_container
from .errors import ShapeInferenceFailure, UnsupportedArchitecture
from .models import TinyDecoder, TinyDecoderConfig, load_model

TINY_DECODER_ARCH_ID = 0x54494E59

FFN_TYPE = 0
HEAD_TYPE = 1

SCOPE_CATEGORIES = {
    "gqa": "GQA/MQA restricted head sharing",
    "head_mixing": "head-mixing attention (cross-head coupling)",
    "moe": "mixture-of-experts routing",
}


@dataclass
class ExportManifest:
    arch: str
    arch_id: int
    n_layers: int
    n_heads: int
    d_head: int
    d_ff: int
    block_specs: list[dict] = field(default_factory=list)
    uncovered: list[str] = field(default_factory=list)
    name_map: dict[str, str] = field(default_factory=dict)  # container -> framework

    def to_json(self) -> dict:
        return {
            "arch": self.arch, "arch_id": self.arch_id, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "d_head": self.d_head, "d_ff": self.d_ff,
            "blocks": self.block_specs, "uncovered": sorted(self.uncovered),
            "name_map": self.name_map,
        }


def _tensor(state, key) -> np.ndarray:
    return state[key].detach().cpu().numpy().astype(np.float32)


def _reject_restricted(cfg: TinyDecoderConfig) -> None:
    if cfg.n_kv_heads != cfg.n_heads:
        raise UnsupportedArchitecture(
            f"architecture uses {SCOPE_CATEGORIES['gqa']} "
            f"({cfg.n_heads} query heads over {cfg.n_kv_heads} key/value heads); "
            "head alignment is only function-preserving for independent heads")
    if cfg.head_mixing:
        raise UnsupportedArchitecture(
            f"architecture uses {SCOPE_CATEGORIES['head_mixing']}; head "
            "permutations would need the mixing matrix conjugated")


def export_model(model: TinyDecoder) -> tuple[list[dict[str, np.ndarray]], ExportManifest]:
    cfg = model.cfg
    _reject_restricted(cfg)
    if cfg.d_model % cfg.n_heads != 0:
        raise ShapeInferenceFailure(
            f"head axis does not divide d_model: {cfg.d_model} / {cfg.n_heads}")
    state = model.state_dict()
    layers: list[dict[str, np.ndarray]] = []
    name_map: dict[str, str] = {}

    def put(layer_tensors, cname, fname):
        layer_tensors[cname] = _tensor(state, fname)
        name_map[f"L{len(layers) + 1}/{cname}"] = fname

    preamble: dict[str, np.ndarray] = {}
    put(preamble, "embed.weight", "embed.weight")
    put(preamble, "pos.weight", "pos.weight")
    layers.append(preamble)

    for i in range(cfg.n_layers):
        lt: dict[str, np.ndarray] = {}
        for cname, fname in [
            ("ln1.weight", f"blocks.{i}.ln1.weight"), ("ln1.bias", f"blocks.{i}.ln1.bias"),
            ("attn.q.weight", f"blocks.{i}.attn.q.weight"), ("attn.q.bias", f"blocks.{i}.attn.q.bias"),
            ("attn.k.weight", f"blocks.{i}.attn.k.weight"), ("attn.k.bias", f"blocks.{i}.attn.k.bias"),
            ("attn.v.weight", f"blocks.{i}.attn.v.weight"), ("attn.v.bias", f"blocks.{i}.attn.v.bias"),
            ("attn.o.weight", f"blocks.{i}.attn.o.weight"), ("attn.o.bias", f"blocks.{i}.attn.o.bias"),
            ("ln2.weight", f"blocks.{i}.ln2.weight"), ("ln2.bias", f"blocks.{i}.ln2.bias"),
            ("ffn.up.weight", f"blocks.{i}.up.weight"), ("ffn.up.bias", f"blocks.{i}.up.bias"),
            ("ffn.down.weight", f"blocks.{i}.down.weight"), ("ffn.down.bias", f"blocks.{i}.down.bias"),
        ]:
            put(lt, cname, fname)
        layers.append(lt)

    tail: dict[str, np.ndarray] = {}
    put(tail, "ln_f.weight", "ln_f.weight")
    put(tail, "ln_f.bias", "ln_f.bias")
    put(tail, "head.weight", "head.weight")
    layers.append(tail)

    block_specs = [
        {"type_id": FFN_TYPE, "block_count": cfg.d_ff, "raw": False,
         "members": [{"tensor": "ffn.up.weight", "axis": 0},
                     {"tensor": "ffn.up.bias", "axis": 0},
                     {"tensor": "ffn.down.weight", "axis": 1}]},
        {"type_id": HEAD_TYPE, "block_count": cfg.n_heads, "raw": False,
         "members": [{"tensor": "attn.q.weight", "axis": 0},
                     {"tensor": "attn.q.bias", "axis": 0},
                     {"tensor": "attn.k.weight", "axis": 0},
                     {"tensor": "attn.k.bias", "axis": 0},
                     {"tensor": "attn.v.weight", "axis": 0},
                     {"tensor": "attn.v.bias", "axis": 0},
                     {"tensor": "attn.o.weight", "axis": 1}]},
    ]
    _check_block_consistency(layers, block_specs)
    covered = {m["tensor"] for s in block_specs for m in s["members"]}
    uncovered = sorted({name for lt in layers for name in lt if name not in covered})
    manifest = ExportManifest(
        arch="tiny-decoder", arch_id=TINY_DECODER_ARCH_ID,
        n_layers=len(layers), n_heads=cfg.n_heads,
        d_head=cfg.d_model // cfg.n_heads, d_ff=cfg.d_ff,
        block_specs=block_specs, uncovered=uncovered, name_map=name_map)
    return layers, manifest


def _check_block_consistency(layers, block_specs) -> None:
    """Every member axis must divide the block count identically wherever the
    type appears; the codec requires equal counts across consecutive layers."""
    for spec in block_specs:
        count = spec["block_count"]
        for lt in layers:
            if not all(m["tensor"] in lt for m in spec["members"]):
                continue
            for m in spec["members"]:
                n = lt[m["tensor"]].shape[m["axis"]]
                if n % count != 0:
                    raise ShapeInferenceFailure(
                        f"{m['tensor']} axis {m['axis']} length {n} is not a "
                        f"multiple of block count {count}")


def export_container(model_path, out_path, spec_path, arch_hint: str = "tiny-decoder",
                     config_toml_path=None):
    if arch_hint != "tiny-decoder":
        raise UnsupportedArchitecture(
            f"unknown architecture hint {arch_hint!r}; v1 supports 'tiny-decoder'")
    model = load_model(model_path)
    layers, manifest = export_model(model)
    write_container(layers, manifest.arch_id, out_path)
    with open(spec_path, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
    if config_toml_path is not None:
        with open(config_toml_path, "w") as fh:
            fh.write(blocks_config_toml(manifest))
    return manifest


def blocks_config_toml(manifest: ExportManifest) -> str:
    """Codec config fragment with the generated block specs, ready for encode -c."""
    lines = []
    for spec in manifest.block_specs:
        lines.append("[[blocks]]")
        lines.append(f"type_id = {spec['type_id']}")
        lines.append(f"block_count = {spec['block_count']}")
        members = ", ".join(f'["{m["tensor"]}", {m["axis"]}]' for m in spec["members"])
        lines.append(f"members = [{members}]")
        lines.append("")
    return "\n".join(lines)
