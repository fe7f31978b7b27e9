"""Portable tensor-container format: the boundary between the codec and the outside world.

File layout (all integers little-endian):
    bytes 0..3   magic "MCTC"
    bytes 4..7   u32 manifest length
    manifest     UTF-8 JSON: {"arch_id": u32, "layers": [{"index": i,
                 "tensors": [{"name", "shape", "dtype", "offset"}, ...]}, ...]}
    data region  raw f32 little-endian, tensors at their declared byte offsets
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidCheckpoint,
    IoFailure,
    ManifestParse,
    MissingFile,
    NonFiniteValue,
    ShapeMismatch,
)

MAGIC = b"MCTC"
_DTYPE_BYTES = {"f32": 4}


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    dtype: str = "f32"
    offset: int = 0

    def __post_init__(self):
        if self.dtype not in _DTYPE_BYTES:
            raise InvalidCheckpoint(f"unsupported dtype {self.dtype!r} (v1 is f32-only)")
        if not self.shape or any(d <= 0 for d in self.shape):
            raise InvalidCheckpoint(f"tensor {self.name!r} has non-positive shape {self.shape}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nbytes(self) -> int:
        return self.size * _DTYPE_BYTES[self.dtype]


@dataclass
class LayerTensors:
    """One layer of the checkpoint: 1-based index plus named dense f32 arrays."""

    index: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors.keys())


@dataclass
class Checkpoint:
    arch_id: int
    layers: list[LayerTensors]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def validate(self) -> None:
        if self.num_layers < 1:
            raise InvalidCheckpoint("checkpoint must have at least one layer")
        for pos, layer in enumerate(self.layers, start=1):
            if layer.index != pos:
                raise InvalidCheckpoint(
                    f"layer index {layer.index} does not match position {pos}")
            if not layer.tensors:
                raise InvalidCheckpoint(f"layer {pos} has no tensors")
            for name, arr in layer.tensors.items():
                if arr.size == 0:
                    raise InvalidCheckpoint(f"tensor {name!r} in layer {pos} is empty")
                if not np.isfinite(arr).all():
                    raise NonFiniteValue(f"tensor {name!r} in layer {pos} has NaN/Inf values")


def param_count(ckpt: Checkpoint) -> int:
    """Total scalar parameter count: sum over all tensors of product(shape)."""
    return int(sum(arr.size for layer in ckpt.layers for arr in layer.tensors.values()))


def _build_manifest(ckpt: Checkpoint) -> tuple[dict, int]:
    layers = []
    offset = 0
    for layer in ckpt.layers:
        entries = []
        for name in sorted(layer.tensors):
            arr = layer.tensors[name]
            entries.append({
                "name": name,
                "shape": [int(d) for d in arr.shape],
                "dtype": "f32",
                "offset": offset,
            })
            offset += arr.size * 4
        layers.append({"index": layer.index, "tensors": entries})
    return {"arch_id": int(ckpt.arch_id), "layers": layers}, offset


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint in container format; bytes are deterministic for equal inputs."""
    ckpt.validate()
    manifest, data_len = _build_manifest(ckpt)
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = bytearray(data_len)
    for layer in ckpt.layers:
        for entry in manifest["layers"][layer.index - 1]["tensors"]:
            arr = np.ascontiguousarray(layer.tensors[entry["name"]], dtype="<f4")
            start = entry["offset"]
            data[start:start + arr.nbytes] = arr.tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(manifest_bytes)))
            fh.write(manifest_bytes)
            fh.write(bytes(data))
    except OSError as exc:
        raise IoFailure(f"failed to write {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    """Load and validate a container file, materializing all tensors."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise MissingFile(f"no such container: {path}") from exc
    except OSError as exc:
        raise IoFailure(f"failed to read {path}: {exc}") from exc

    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ManifestParse(f"{path}: not a container file (bad magic)")
    (manifest_len,) = struct.unpack("<I", raw[4:8])
    if 8 + manifest_len > len(raw):
        raise ManifestParse(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(raw[8:8 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestParse(f"{path}: manifest is not valid JSON: {exc}") from exc

    data = raw[8 + manifest_len:]
    try:
        arch_id = int(manifest["arch_id"])
        layer_entries = manifest["layers"]
    except (KeyError, TypeError) as exc:
        raise ManifestParse(f"{path}: manifest missing required fields: {exc}") from exc

    specs: list[TensorSpec] = []
    layers: list[LayerTensors] = []
    for layer_entry in layer_entries:
        layer = LayerTensors(index=int(layer_entry["index"]))
        seen: set[str] = set()
        for t in layer_entry["tensors"]:
            spec = TensorSpec(
                name=t["name"], shape=tuple(int(d) for d in t["shape"]),
                dtype=t.get("dtype", "f32"), offset=int(t["offset"]))
            if spec.name in seen:
                raise InvalidCheckpoint(f"duplicate tensor {spec.name!r} in layer {layer.index}")
            seen.add(spec.name)
            specs.append(spec)
            end = spec.offset + spec.nbytes
            if end > len(data):
                raise ShapeMismatch(
                    f"tensor {spec.name!r} declares {spec.nbytes} bytes at offset "
                    f"{spec.offset} but data region has {len(data)} bytes")
            arr = np.frombuffer(data[spec.offset:end], dtype="<f4").reshape(spec.shape).copy()
            if not np.isfinite(arr).all():
                raise NonFiniteValue(f"tensor {spec.name!r} in layer {layer.index} has NaN/Inf")
            layer.tensors[spec.name] = arr
        layers.append(layer)

    # Declared bytes must account for the data region exactly: no silent truncation.
    specs.sort(key=lambda s: s.offset)
    cursor = 0
    for spec in specs:
        if spec.offset != cursor:
            raise ShapeMismatch(
                f"tensor offsets overlap or leave a gap at byte {cursor} (tensor {spec.name!r})")
        cursor += spec.nbytes
    if cursor != len(data):
        raise ShapeMismatch(
            f"data region has {len(data)} bytes but manifest declares {cursor}")

    ckpt = Checkpoint(arch_id=arch_id, layers=layers)
    ckpt.validate()
    return ckpt


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def save_activation_summaries(acts: dict[tuple[int, int], np.ndarray], path) -> None:
    """Sidecar container: per-block mean activations keyed (layer, type).

    Layer i of the sidecar holds one tensor per block type, named "type<t>",
    of shape (blocks, summary_dim).
    """
    by_layer: dict[int, dict[str, np.ndarray]] = {}
    for (layer, tid), arr in acts.items():
        by_layer.setdefault(layer, {})[f"type{tid}"] = np.asarray(arr, dtype=np.float32)
    layers = [LayerTensors(index=i, tensors=by_layer[key])
              for i, key in enumerate(sorted(by_layer), start=1)]
    # preserve original layer numbering through a dense remap table
    remap = {i: key for i, key in enumerate(sorted(by_layer), start=1)}
    if any(remap[i] != i for i in remap):
        raise InvalidCheckpoint("activation summaries must cover contiguous layers from 1")
    save_checkpoint(Checkpoint(arch_id=0, layers=layers), path)


def load_activation_summaries(path) -> dict[tuple[int, int], np.ndarray]:
    ckpt = load_checkpoint(path)
    out: dict[tuple[int, int], np.ndarray] = {}
    for layer in ckpt.layers:
        for name, arr in layer.tensors.items():
            if not name.startswith("type"):
                raise ManifestParse(f"unexpected tensor {name!r} in activation sidecar")
            out[(layer.index, int(name[4:]))] = arr
    return out
