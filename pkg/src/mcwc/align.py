"""Similarity matrices and assignment solvers for function-preserving alignment.

Matching is chained: candidates at layer l are scored against the aligned
blocks of layer l-1, so the aligned trajectory is consistent across depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .blocks import BlockSet, Permutation, apply_permutation, identity_permutation, random_permutation
from .errors import DimensionMismatch, NonFinite, NonSquare, ShapeMismatch

SOLVER_POLICIES = ("adaptive", "exact", "screened", "identity", "random")


@dataclass
class AlignConfig:
    alpha: float = 0.7
    solver: str = "adaptive"
    k_cand: int = 16
    refine_passes: int = 1
    exact_threshold: int = 256
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.k_cand < 1:
            raise ValueError("k_cand must be >= 1")
        if self.solver not in SOLVER_POLICIES:
            raise ValueError(f"unknown solver policy {self.solver!r}")


@dataclass
class SimilarityMatrix:
    entries: np.ndarray
    kind: str  # weight | activation | hybrid | neg_residual_energy

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])


@dataclass
class ActivationSummary:
    """Per-block mean activation vectors, one row per block."""

    means: np.ndarray  # (B, d_act)

    @property
    def count(self) -> int:
        return int(self.means.shape[0])


def _cosine_matrix(ref: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Rows of ref vs rows of cand; zero-norm rows score 0 against everything."""
    ref = np.asarray(ref, dtype=np.float64)
    cand = np.asarray(cand, dtype=np.float64)
    if ref.shape != cand.shape:
        raise ShapeMismatch(f"block shapes differ: {ref.shape} vs {cand.shape}")
    rn = np.linalg.norm(ref, axis=1)
    cn = np.linalg.norm(cand, axis=1)
    safe_rn = np.where(rn == 0, 1.0, rn)
    safe_cn = np.where(cn == 0, 1.0, cn)
    s = (ref / safe_rn[:, None]) @ (cand / safe_cn[:, None]).T
    s[rn == 0, :] = 0.0
    s[:, cn == 0] = 0.0
    return np.clip(s, -1.0, 1.0)


def weight_similarity(ref: BlockSet, cand: BlockSet) -> SimilarityMatrix:
    return SimilarityMatrix(_cosine_matrix(ref.blocks, cand.blocks), kind="weight")


def activation_similarity(ref: ActivationSummary, cand: ActivationSummary) -> SimilarityMatrix:
    return SimilarityMatrix(_cosine_matrix(ref.means, cand.means), kind="activation")


def hybrid_similarity(sw: SimilarityMatrix, sa: SimilarityMatrix,
                      alpha: float) -> SimilarityMatrix:
    if sw.entries.shape != sa.entries.shape:
        raise DimensionMismatch(
            f"similarity shapes differ: {sw.entries.shape} vs {sa.entries.shape}")
    return SimilarityMatrix(alpha * sw.entries + (1.0 - alpha) * sa.entries, kind="hybrid")


def residual_energy_costs(cand: BlockSet, predicted: BlockSet) -> SimilarityMatrix:
    """entry (i, j) = -||cand_j - predicted_i||_F^2; maximizing solves the
    residual-energy matching objective."""
    c = np.asarray(cand.blocks, dtype=np.float64)
    p = np.asarray(predicted.blocks, dtype=np.float64)
    if c.shape != p.shape:
        raise ShapeMismatch(f"block shapes differ: {c.shape} vs {p.shape}")
    c2 = (c * c).sum(axis=1)
    p2 = (p * p).sum(axis=1)
    cross = p @ c.T
    sq = p2[:, None] - 2.0 * cross + c2[None, :]
    return SimilarityMatrix(-np.maximum(sq, 0.0), kind="neg_residual_energy")


def total_score(s: np.ndarray, perm: Permutation) -> float:
    idx = np.arange(len(perm))
    return float(s[idx, perm.mapping - 1].sum())


def _canonicalize_ties(s: np.ndarray, mapping: np.ndarray) -> np.ndarray:
    """Among exactly-equal-score swaps prefer the lexicographically smaller mapping."""
    b = len(mapping)
    changed = True
    guard = 0
    while changed and guard < b:
        changed = False
        guard += 1
        for i in range(b):
            ci = mapping[i] - 1
            for j in range(i + 1, b):
                cj = mapping[j] - 1
                if cj + 1 < mapping[i]:
                    old = s[i, ci] + s[j, cj]
                    new = s[i, cj] + s[j, ci]
                    if new == old:
                        mapping[i], mapping[j] = mapping[j], mapping[i]
                        ci = mapping[i] - 1
                        changed = True
    return mapping


def _solve_exact(s: np.ndarray) -> Permutation:
    rows, cols = linear_sum_assignment(-s)
    mapping = np.empty(s.shape[0], dtype=np.int64)
    mapping[rows] = cols + 1
    mapping = _canonicalize_ties(s, mapping)
    return Permutation(mapping)


def _solve_screened(s: np.ndarray, k_cand: int, refine_passes: int) -> Permutation:
    b = s.shape[0]
    k = min(k_cand, b)
    # per-row top-k columns, then one global pass in max-score priority order
    part = np.argpartition(-s, k - 1, axis=1)[:, :k]
    cand_rows = np.repeat(np.arange(b), k)
    cand_cols = part.ravel()
    cand_scores = s[cand_rows, cand_cols]
    order = np.lexsort((cand_cols, cand_rows, -cand_scores))
    row_free = np.ones(b, dtype=bool)
    col_free = np.ones(b, dtype=bool)
    mapping = np.zeros(b, dtype=np.int64)
    for idx in order:
        i = cand_rows[idx]
        j = cand_cols[idx]
        if row_free[i] and col_free[j]:
            mapping[i] = j + 1
            row_free[i] = False
            col_free[j] = False
    left_rows = np.flatnonzero(row_free)
    left_cols = np.flatnonzero(col_free)
    mapping[left_rows] = left_cols + 1
    for _ in range(refine_passes):
        improved = False
        for i in range(b):
            ci = mapping[i] - 1
            others = mapping - 1
            # gain of swapping row i's column with each other row's column
            gains = (s[i, others] + s[np.arange(b), ci]) - (s[i, ci] + s[np.arange(b), others])
            gains[i] = 0.0
            jbest = int(np.argmax(gains))
            if gains[jbest] > 0:
                mapping[i], mapping[jbest] = mapping[jbest], mapping[i]
                improved = True
        if not improved:
            break
    return Permutation(mapping)


def solve_assignment(sim: SimilarityMatrix, cfg: AlignConfig) -> Permutation:
    """Pick the permutation maximizing total matched similarity under the policy."""
    s = np.asarray(sim.entries, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise NonSquare(f"similarity matrix has shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NonFinite("similarity matrix has non-finite entries")
    b = s.shape[0]
    if cfg.solver == "identity" or b == 1:
        return identity_permutation(b)
    if cfg.solver == "random":
        return random_permutation(b, np.random.default_rng(cfg.seed))
    if cfg.solver == "exact" or (cfg.solver == "adaptive" and b <= cfg.exact_threshold):
        return _solve_exact(s)
    return _solve_screened(s, cfg.k_cand, cfg.refine_passes)


def align_layer_pair(ref_aligned: BlockSet, cand: BlockSet,
                     ref_act: ActivationSummary | None = None,
                     cand_act: ActivationSummary | None = None,
                     cfg: AlignConfig | None = None,
                     predicted: BlockSet | None = None
                     ) -> tuple[Permutation, BlockSet]:
    """Match candidate blocks against the previous aligned layer and apply the
    winning permutation. With activation summaries absent, alpha is forced to 1.
    Passing `predicted` switches to the residual-energy objective."""
    cfg = cfg or AlignConfig()
    if cand.count != ref_aligned.count:
        raise ShapeMismatch(
            f"block counts differ: ref {ref_aligned.count} vs cand {cand.count}")
    if cand.count == 1 or cfg.solver == "identity":
        perm = identity_permutation(cand.count)
        return perm, apply_permutation(cand, perm)
    if predicted is not None:
        sim = residual_energy_costs(cand, predicted)
    else:
        sim = weight_similarity(ref_aligned, cand)
        if ref_act is not None and cand_act is not None:
            sim = hybrid_similarity(sim, activation_similarity(ref_act, cand_act),
                                    cfg.alpha)
    perm = solve_assignment(sim, cfg)
    return perm, apply_permutation(cand, perm)


def empirical_code_entropy_bits(values: np.ndarray, step: float) -> float:
    """Total empirical-entropy bits of values quantized at the given step."""
    v = np.asarray(values, dtype=np.float64).ravel()
    scaled = v / max(step, 1e-12)
    codes = np.trunc(scaled + np.copysign(0.5, scaled)).astype(np.int64)
    _, counts = np.unique(codes, return_counts=True)
    pk = counts / counts.sum()
    return float(-(pk * np.log2(pk)).sum() * len(v))


def alignment_gain(ref_blocks: np.ndarray, cand_blocks: np.ndarray,
                   perm: Permutation, gamma: float) -> float:
    """Estimated residual-entropy saving (bits) of using perm over identity,
    measured with a copy-last residual at the step the aligned stream would use."""
    aligned = cand_blocks[perm.mapping - 1]
    res_aligned = aligned - ref_blocks
    res_identity = cand_blocks - ref_blocks
    step = max(gamma * float(res_aligned.std()), 1e-8)
    before = empirical_code_entropy_bits(res_identity, step)
    after = empirical_code_entropy_bits(res_aligned, step)
    return before - after
