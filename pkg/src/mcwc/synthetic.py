"""Synthetic checkpoints with planted block permutations and smooth drift,
used by the property suites and the self-test.

Layer l holds latent blocks evolved as scale * latent(l-1) + noise, stored
under a fresh random block permutation per layer. Alignment should undo the
permutations; the scale drift gives the predictor something a copy-last
baseline cannot capture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockMember, BlockTypeSpec, Permutation
from .container import Checkpoint, LayerTensors


@dataclass
class SyntheticSpec:
    checkpoint: Checkpoint
    specs: list[BlockTypeSpec]
    planted: dict[tuple[int, int], np.ndarray]  # (layer, type) -> row permutation used
    latents: dict[tuple[int, int], np.ndarray]


def expected_alignment(planted: dict[tuple[int, int], np.ndarray], layer: int,
                       type_id: int) -> Permutation:
    """The permutation a chained aligner should return at (layer, type): the one
    mapping the stored order back to the layer-1 anchor order."""
    sigma_1 = planted[(1, type_id)]
    sigma_l = planted[(layer, type_id)]
    inv = np.empty_like(sigma_l)
    inv[sigma_l] = np.arange(len(sigma_l))
    return Permutation(inv[sigma_1] + 1)


def make_synthetic_checkpoint(seed: int = 0, n_layers: int = 8, n_types: int = 2,
                              blocks: int = 16, block_dim: int = 24,
                              drift: float = 0.05, scale_drift: float = 0.98,
                              planted_perms: bool = True,
                              with_bias: bool = False,
                              arch_id: int = 0x53594E54) -> SyntheticSpec:
    rng = np.random.default_rng(seed)
    planted: dict[tuple[int, int], np.ndarray] = {}
    latents: dict[tuple[int, int], np.ndarray] = {}
    layers = []
    for li in range(1, n_layers + 1):
        tensors = {}
        for t in range(n_types):
            if li == 1:
                lat = rng.standard_normal((blocks, block_dim))
            else:
                prev = latents[(li - 1, t)]
                norm = np.linalg.norm(prev, axis=1, keepdims=True) / np.sqrt(block_dim)
                lat = scale_drift * prev + drift * norm * rng.standard_normal(prev.shape)
            latents[(li, t)] = lat
            sigma = rng.permutation(blocks) if planted_perms else np.arange(blocks)
            planted[(li, t)] = sigma
            tensors[f"t{t}.w"] = lat[sigma].astype(np.float32)
            if with_bias:
                tensors[f"t{t}.b"] = rng.standard_normal(blocks).astype(np.float32)
        layers.append(LayerTensors(index=li, tensors=tensors))
    specs = [BlockTypeSpec(type_id=t, members=[BlockMember(f"t{t}.w", 0)])
             for t in range(n_types)]
    return SyntheticSpec(checkpoint=Checkpoint(arch_id=arch_id, layers=layers),
                         specs=specs, planted=planted, latents=latents)
