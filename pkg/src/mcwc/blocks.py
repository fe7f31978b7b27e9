"""Typed block extraction from layer tensors and exact reassembly.

A block type names a set of member tensors and, for each, the axis whose
slices form the permutable unit. Multi-tensor blocks are the concatenation
of per-member slices in declared order; when the axis length is a multiple
of the block count, each block takes a contiguous group of indices (so an
attention head spanning Q/K/V/O is one block).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import LayerTensors
from .errors import (
    AxisOutOfRange,
    BlockCountMismatch,
    IncompleteBlockSet,
    LengthMismatch,
    MissingTensor,
    NotBijection,
    ShapeMismatch,
)


@dataclass(frozen=True)
class BlockMember:
    tensor: str
    axis: int


@dataclass
class BlockTypeSpec:
    """One permutable block family: member tensors, block axis, block count."""

    type_id: int
    members: list[BlockMember]
    block_count: int | None = None  # inferred from the first member when None
    raw: bool = False  # uncovered-tensor fallback: B=1, keyframe-coded at every layer

    def to_json(self) -> dict:
        return {
            "type_id": self.type_id,
            "members": [{"tensor": m.tensor, "axis": m.axis} for m in self.members],
            "block_count": self.block_count,
            "raw": self.raw,
        }

    @staticmethod
    def from_json(obj: dict) -> "BlockTypeSpec":
        return BlockTypeSpec(
            type_id=int(obj["type_id"]),
            members=[BlockMember(m["tensor"], int(m["axis"])) for m in obj["members"]],
            block_count=None if obj.get("block_count") is None else int(obj["block_count"]),
            raw=bool(obj.get("raw", False)),
        )

    def present_in(self, layer: LayerTensors) -> bool:
        return all(m.tensor in layer.tensors for m in self.members)


@dataclass
class Permutation:
    """Bijection over 1..B stored as a mapping array: output slot i holds input π(i)."""

    mapping: np.ndarray

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        b = self.mapping.shape[0]
        if self.mapping.ndim != 1 or b == 0:
            raise NotBijection("permutation mapping must be a non-empty 1-D array")
        if not np.array_equal(np.sort(self.mapping), np.arange(1, b + 1)):
            raise NotBijection(f"mapping {self.mapping.tolist()} is not a bijection on 1..{b}")

    def __len__(self) -> int:
        return int(self.mapping.shape[0])

    def __eq__(self, other) -> bool:
        return isinstance(other, Permutation) and np.array_equal(self.mapping, other.mapping)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.mapping, np.arange(1, len(self) + 1)))


def identity_permutation(b: int) -> Permutation:
    return Permutation(np.arange(1, b + 1))


def random_permutation(b: int, rng: np.random.Generator) -> Permutation:
    return Permutation(rng.permutation(b) + 1)


def invert_permutation(perm: Permutation) -> Permutation:
    """π⁻¹ with π⁻¹(π(i)) = i, used to restore canonical ordering."""
    inv = np.empty(len(perm), dtype=np.int64)
    inv[perm.mapping - 1] = np.arange(1, len(perm) + 1)
    return Permutation(inv)


@dataclass
class BlockSet:
    """Blocks of one type at one layer, vectorized as a (B, d) array."""

    layer: int
    type_id: int
    blocks: np.ndarray  # (B, d) float32
    piece_shapes: list[tuple[int, ...]] = field(default_factory=list)  # per member

    @property
    def count(self) -> int:
        return int(self.blocks.shape[0])

    @property
    def dim(self) -> int:
        return int(self.blocks.shape[1])


def _member_geometry(layer: LayerTensors, spec: BlockTypeSpec):
    """Resolve block count and per-member (group size, piece shape)."""
    count = spec.block_count
    geoms = []
    for m in spec.members:
        if m.tensor not in layer.tensors:
            raise MissingTensor(f"layer {layer.index} has no tensor {m.tensor!r}")
        arr = layer.tensors[m.tensor]
        if not (0 <= m.axis < arr.ndim):
            raise AxisOutOfRange(f"axis {m.axis} out of range for {m.tensor!r} with shape {arr.shape}")
        n = arr.shape[m.axis]
        if count is None:
            count = n
        if n % count != 0:
            raise BlockCountMismatch(
                f"{m.tensor!r} axis {m.axis} has length {n}, not a multiple of block count {count}")
        group = n // count
        piece_shape = list(arr.shape)
        piece_shape[m.axis] = group
        geoms.append((m, arr, group, tuple(piece_shape)))
    return count, geoms


def extract_blocks(layer: LayerTensors, spec: BlockTypeSpec) -> BlockSet:
    """Slice every member tensor along its block axis and concatenate per block."""
    count, geoms = _member_geometry(layer, spec)
    pieces = []
    piece_shapes = []
    for m, arr, group, piece_shape in geoms:
        moved = np.moveaxis(arr, m.axis, 0)  # (n, rest...)
        rest = int(np.prod(piece_shape) // group) if group else 0
        flat = moved.reshape(count, group * rest)
        pieces.append(np.ascontiguousarray(flat, dtype=np.float32))
        piece_shapes.append(piece_shape)
    blocks = np.concatenate(pieces, axis=1) if len(pieces) > 1 else pieces[0]
    return BlockSet(layer=layer.index, type_id=spec.type_id,
                    blocks=blocks, piece_shapes=piece_shapes)


def scatter_blocks(bs: BlockSet, spec: BlockTypeSpec, shapes: dict[str, tuple[int, ...]],
                   out: dict[str, np.ndarray]) -> None:
    """Write the blocks of one set back into (pre-allocated) layer tensors."""
    offset = 0
    for m, piece_shape in zip(spec.members, bs.piece_shapes):
        if m.tensor not in shapes:
            raise ShapeMismatch(f"no declared shape for tensor {m.tensor!r}")
        full_shape = tuple(shapes[m.tensor])
        group = piece_shape[m.axis]
        rest = int(np.prod(piece_shape) // group)
        width = group * rest
        chunk = bs.blocks[:, offset:offset + width]
        offset += width
        moved_shape = (bs.count * group,) + tuple(
            d for i, d in enumerate(full_shape) if i != m.axis)
        moved = chunk.reshape(moved_shape)
        arr = np.moveaxis(moved, 0, m.axis)
        if arr.shape != full_shape:
            raise ShapeMismatch(
                f"assembled {m.tensor!r} has shape {arr.shape}, declared {full_shape}")
        out[m.tensor] = np.ascontiguousarray(arr, dtype=np.float32)
    if offset != bs.dim:
        raise IncompleteBlockSet(
            f"block set for type {bs.type_id} has width {bs.dim}, members consume {offset}")


def assemble_layer(block_sets: list[BlockSet], specs: list[BlockTypeSpec],
                   shapes: dict[str, tuple[int, ...]], index: int) -> LayerTensors:
    """Inverse of extraction: rebuild every declared tensor from its block sets."""
    by_type = {bs.type_id: bs for bs in block_sets}
    out: dict[str, np.ndarray] = {}
    for spec in specs:
        if spec.type_id not in by_type:
            raise IncompleteBlockSet(f"missing block set for type {spec.type_id}")
        bs = by_type[spec.type_id]
        expected = spec.block_count
        if expected is not None and bs.count != expected:
            raise IncompleteBlockSet(
                f"type {spec.type_id} expects {expected} blocks, got {bs.count}")
        scatter_blocks(bs, spec, shapes, out)
    covered = set(out)
    declared = set(shapes)
    if covered != declared:
        raise IncompleteBlockSet(
            f"assembly covered {sorted(covered)} but layer declares {sorted(declared)}")
    return LayerTensors(index=index, tensors=out)


def apply_permutation(bs: BlockSet, perm: Permutation) -> BlockSet:
    """Reindex blocks: output block i is input block π(i)."""
    if len(perm) != bs.count:
        raise LengthMismatch(f"permutation of size {len(perm)} applied to {bs.count} blocks")
    return BlockSet(layer=bs.layer, type_id=bs.type_id,
                    blocks=bs.blocks[perm.mapping - 1].copy(),
                    piece_shapes=list(bs.piece_shapes))
