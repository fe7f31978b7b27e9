"""Alignment-quality metrics, executable symmetry checks, and deployment
cost calculators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, NoBreakEven, ShapeMismatch, ZeroEnergy, ZeroVariance
from .nnops import gelu


@dataclass
class PairStats:
    layer: int
    type_id: int
    cosine_mean: float
    cosine_std: float
    r2: float
    nre: float


@dataclass
class PredictabilityReport:
    rows: list[PairStats] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {"cosine_mean": 0.0, "cosine_std": 0.0, "r2": 0.0, "nre": 0.0}
        cos = np.array([r.cosine_mean for r in self.rows])
        return {
            "cosine_mean": float(cos.mean()),
            "cosine_std": float(cos.std()),
            "r2": float(np.mean([r.r2 for r in self.rows])),
            "nre": float(np.mean([r.nre for r in self.rows])),
        }

    def to_csv(self) -> str:
        lines = ["layer,type,cosine_mean,cosine_std,r2,nre"]
        for r in self.rows:
            lines.append(f"{r.layer},{r.type_id},{r.cosine_mean:.6f},"
                         f"{r.cosine_std:.6f},{r.r2:.6f},{r.nre:.6f}")
        agg = self.aggregate()
        lines.append(f"aggregate,,{agg['cosine_mean']:.6f},{agg['cosine_std']:.6f},"
                     f"{agg['r2']:.6f},{agg['nre']:.6f}")
        return "\n".join(lines) + "\n"


def matched_cosines(ref: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """Cosine between block i of the previous layer and block i of the current."""
    ref = np.asarray(ref, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    if ref.shape != cur.shape:
        raise ShapeMismatch(f"block shapes differ: {ref.shape} vs {cur.shape}")
    num = (ref * cur).sum(axis=1)
    den = np.linalg.norm(ref, axis=1) * np.linalg.norm(cur, axis=1)
    out = np.zeros(len(num))
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def cosine_profile(pairs: list[tuple[int, int, np.ndarray, np.ndarray]]) -> list[PairStats]:
    """Adjacent-layer cosine statistics; pairs are (layer, type, prev, cur)."""
    rows = []
    for layer, tid, ref, cur in pairs:
        cos = matched_cosines(ref, cur)
        rows.append(PairStats(layer=layer, type_id=tid,
                              cosine_mean=float(cos.mean()),
                              cosine_std=float(cos.std()), r2=0.0, nre=0.0))
    return rows


def predictor_r2(targets: np.ndarray, predictions: np.ndarray) -> float:
    """Explained variance: 1 - sum||t - p||^2 / sum||t - mean||^2 over blocks."""
    t = np.asarray(targets, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeMismatch(f"shapes differ: {t.shape} vs {p.shape}")
    if t.shape[0] < 2:
        raise ZeroVariance("need at least two blocks for variance")
    mean = t.mean(axis=0, keepdims=True)
    den = float(((t - mean) ** 2).sum())
    if den == 0.0:
        raise ZeroVariance("all target blocks are identical")
    return 1.0 - float(((t - p) ** 2).sum()) / den


def nre(targets: np.ndarray, predictions: np.ndarray) -> float:
    """Normalized residual energy: sum||t - p||^2 / sum||t||^2."""
    t = np.asarray(targets, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeMismatch(f"shapes differ: {t.shape} vs {p.shape}")
    den = float((t * t).sum())
    if den == 0.0:
        raise ZeroEnergy("target energy is zero")
    return float(((t - p) ** 2).sum()) / den


def predictability_report(entries) -> PredictabilityReport:
    """entries: iterable of (layer, type, prev_blocks, cur_blocks, predictions);
    predictions default to copy-last (prev_blocks) when None."""
    rows = []
    for layer, tid, prev, cur, pred in entries:
        pred = prev if pred is None else pred
        cos = matched_cosines(prev, cur)
        rows.append(PairStats(
            layer=layer, type_id=tid,
            cosine_mean=float(cos.mean()), cosine_std=float(cos.std()),
            r2=predictor_r2(cur, pred), nre=nre(cur, pred)))
    return PredictabilityReport(rows=rows)


# ---------------------------------------------------------------------------
# executable symmetry checks

def _phi(x: np.ndarray, nonlinearity: str) -> np.ndarray:
    if nonlinearity == "relu":
        return np.maximum(x, 0.0)
    if nonlinearity == "gelu":
        return gelu(x)
    raise ValueError(f"unsupported nonlinearity {nonlinearity!r}")


def verify_mlp_invariance(w1: np.ndarray, b1: np.ndarray, w2: np.ndarray,
                          b2: np.ndarray, perm: np.ndarray, probes: np.ndarray,
                          nonlinearity: str = "gelu",
                          compensate: bool = True) -> float:
    """Max |output difference| between the original two-layer MLP and its
    hidden-permuted reparameterization. compensate=False omits the second-layer
    inverse and serves as the negative control."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    b1 = np.asarray(b1, dtype=np.float64)
    b2 = np.asarray(b2, dtype=np.float64)
    idx = np.asarray(perm, dtype=np.int64) - 1
    if w1.shape[0] != w2.shape[1] or len(idx) != w1.shape[0]:
        raise DimMismatch(
            f"hidden dims disagree: w1 {w1.shape}, w2 {w2.shape}, perm {len(idx)}")
    x = np.asarray(probes, dtype=np.float64)
    base = _phi(x @ w1.T + b1, nonlinearity) @ w2.T + b2
    w1p = w1[idx]
    b1p = b1[idx]
    w2p = w2[:, idx] if compensate else w2
    rep = _phi(x @ w1p.T + b1p, nonlinearity) @ w2p.T + b2
    return float(np.abs(base - rep).max())


def _mha_forward(x, wq, wk, wv, wo, n_heads, d_head):
    n = x.shape[0]
    y_parts = []
    for h in range(n_heads):
        sl = slice(h * d_head, (h + 1) * d_head)
        q = x @ wq[sl].T
        k = x @ wk[sl].T
        v = x @ wv[sl].T
        scores = q @ k.T / math.sqrt(d_head)
        scores -= scores.max(axis=1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=1, keepdims=True)
        y_parts.append(att @ v)
    concat = np.concatenate(y_parts, axis=1)
    return concat @ wo.T


def verify_mha_invariance(wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
                          wo: np.ndarray, head_perm: np.ndarray,
                          probes: np.ndarray, d_head: int,
                          compensate: bool = True) -> float:
    """Max |output difference| of full softmax attention under a head
    permutation applied to Q/K/V rows with (optionally) the matching output
    projection compensation."""
    wq = np.asarray(wq, dtype=np.float64)
    wk = np.asarray(wk, dtype=np.float64)
    wv = np.asarray(wv, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    heads = np.asarray(head_perm, dtype=np.int64) - 1
    n_heads = len(heads)
    if wq.shape[0] != n_heads * d_head or wo.shape[1] != n_heads * d_head:
        raise DimMismatch(
            f"head geometry disagrees: wq {wq.shape}, wo {wo.shape}, "
            f"{n_heads} heads x {d_head}")
    x = np.asarray(probes, dtype=np.float64)
    base = _mha_forward(x, wq, wk, wv, wo, n_heads, d_head)
    block_idx = (heads[:, None] * d_head + np.arange(d_head)[None, :]).ravel()
    identity = bool(np.array_equal(heads, np.arange(n_heads)))
    if identity and compensate:
        # avoid gather copies: identical buffers guarantee a bit-identical pass
        wq_p, wk_p, wv_p, wo_p = wq, wk, wv, wo
    else:
        wq_p = wq[block_idx]
        wk_p = wk[block_idx]
        wv_p = wv[block_idx]
        wo_p = wo[:, block_idx] if compensate else wo
    rep = _mha_forward(x, wq_p, wk_p, wv_p, wo_p, n_heads, d_head)
    return float(np.abs(base - rep).max())


# ---------------------------------------------------------------------------
# deployment cost model

@dataclass
class DeploymentScenario:
    baseline_gb: float
    compressed_gb: float
    bandwidth_gbps: float
    decode_s: float
    materialize_s: float
    extra_encode_s: float

    def __post_init__(self):
        if self.bandwidth_gbps <= 0:
            raise ValueError("bandwidth must be positive")
        for name in ("baseline_gb", "compressed_gb", "decode_s",
                     "materialize_s", "extra_encode_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def materialize_equals_decode_scenario(baseline_gb, compressed_gb, bandwidth_gbps,
                                       decode_s, extra_encode_s) -> DeploymentScenario:
    """Preset where baseline materialization time is taken equal to decode time."""
    return DeploymentScenario(baseline_gb, compressed_gb, bandwidth_gbps,
                              decode_s, decode_s, extra_encode_s)


def per_deployment_saving_s(sc: DeploymentScenario) -> float:
    """Net per-deployment loading advantage: transfer saving - decode + materialize."""
    return (sc.baseline_gb - sc.compressed_gb) / sc.bandwidth_gbps \
        - sc.decode_s + sc.materialize_s


def break_even(sc: DeploymentScenario) -> int:
    """Deployments after which the one-time encode cost is amortized."""
    saving = per_deployment_saving_s(sc)
    if saving <= 0:
        raise NoBreakEven(
            f"per-deployment saving is {saving:.3f}s; encoding never pays off")
    return math.ceil(sc.extra_encode_s / saving)


def bitstream_size_bytes(n_params: float, bits_per_param: float) -> float:
    if n_params < 0 or bits_per_param < 0:
        raise ValueError("inputs must be nonnegative")
    return n_params * bits_per_param / 8.0


def residual_histogram_csv(residuals: np.ndarray, n_buckets: int = 32) -> str:
    """Magnitude-bucket counts of a residual stream, as CSV text."""
    mags = np.abs(np.asarray(residuals, dtype=np.float64)).ravel()
    top = float(mags.max()) if mags.size else 0.0
    edges = np.linspace(0.0, top if top > 0 else 1.0, n_buckets + 1)
    counts, _ = np.histogram(mags, bins=edges)
    lines = ["bucket_lo,bucket_hi,count"]
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        lines.append(f"{lo:.8g},{hi:.8g},{int(c)}")
    return "\n".join(lines) + "\n"
