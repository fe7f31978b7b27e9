"""Conditional discretized-logistic model over quantized codes.

Per quantizer group the context MLP maps (layer embedding, type embedding,
log step, prediction stats, keyframe flag) to a logistic location/scale pair;
bin probabilities are CDF differences at half-integer edges with the two
boundary bins absorbing the tails. Coding CDFs and the codelength proxy use
the floored, renormalized table so no symbol is ever unrepresentable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingPrediction, NonFiniteLoss, OutOfSupport
from .nnops import AdamW, clip_global_norm, gelu, gelu_grad, sigmoid, softplus, softplus_grad

BETA_FLOOR = 1e-3
P_MIN = 2.0 ** -16
HIDDEN = 128
N_FEATURES = 4  # log2 step, mu, sigma, keyframe flag


@dataclass
class SymbolContext:
    """Per-group conditioning for one record's symbols."""

    layer: int
    type_id: int
    keyframe: int
    features: np.ndarray  # (G, 4) float32

    @property
    def groups(self) -> int:
        return int(self.features.shape[0])


def build_context(layer: int, type_id: int, steps: np.ndarray,
                  predicted: np.ndarray | None, keyframe: bool,
                  baseline: np.ndarray | None = None) -> SymbolContext:
    """Assemble group-level features available to the decoder.

    Predictive records carry (mu, sigma) of the predicted block per group;
    keyframes zero-fill those fields; baseline mode (no-prediction coding)
    substitutes the raw pre-quantization block statistics.
    """
    steps = np.asarray(steps, dtype=np.float32)
    g = steps.shape[0]
    feats = np.zeros((g, N_FEATURES), dtype=np.float32)
    feats[:, 0] = np.log2(steps)
    if keyframe:
        feats[:, 3] = 1.0
        return SymbolContext(layer=layer, type_id=type_id, keyframe=1, features=feats)
    source = predicted if baseline is None else baseline
    if source is None:
        raise MissingPrediction(f"record ({layer},{type_id}) is predictive but has no prediction")
    source = np.asarray(source, dtype=np.float32)
    if source.shape[0] != g:
        raise MissingPrediction(f"prediction has {source.shape[0]} groups, expected {g}")
    feats[:, 1] = source.mean(axis=1, dtype=np.float32)
    feats[:, 2] = source.std(axis=1, dtype=np.float32)
    return SymbolContext(layer=layer, type_id=type_id, keyframe=0, features=feats)


@dataclass
class EntropyModelParams:
    ctx_dim: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def init(ctx_dim: int, rng: np.random.Generator) -> "EntropyModelParams":
        w1 = rng.standard_normal((HIDDEN, ctx_dim)) * (1.0 / np.sqrt(ctx_dim))
        w2 = rng.standard_normal((2, HIDDEN)) * (1.0 / np.sqrt(HIDDEN))
        b2 = np.zeros(2)
        b2[1] = 0.5  # start with a moderately wide logistic
        return EntropyModelParams(ctx_dim=ctx_dim, arrays={
            "ent.w1": w1, "ent.b1": np.zeros(HIDDEN), "ent.w2": w2, "ent.b2": b2,
        })

    def published(self) -> "EntropyModelParams":
        return EntropyModelParams(
            ctx_dim=self.ctx_dim,
            arrays={k: v.astype(np.float32) for k, v in self.arrays.items()})


def context_matrix(emb_layer: np.ndarray, emb_type: np.ndarray,
                   features: np.ndarray) -> np.ndarray:
    """(G, ctx_dim) rows: [E_layer, E_type, features]; float64 for the MLP."""
    g = features.shape[0]
    el = np.broadcast_to(np.asarray(emb_layer, dtype=np.float64), (g, len(emb_layer)))
    et = np.broadcast_to(np.asarray(emb_type, dtype=np.float64), (g, len(emb_type)))
    return np.concatenate([el, et, np.asarray(features, dtype=np.float64)], axis=1)


def eval_params(psi: EntropyModelParams, ctx: np.ndarray,
                with_cache: bool = False):
    """Run the context MLP: ctx (m, D) -> alpha (m,), beta (m,) with beta floored."""
    a = psi.arrays
    h_pre = ctx @ a["ent.w1"].astype(np.float64).T + a["ent.b1"].astype(np.float64)
    h = gelu(h_pre)
    out = h @ a["ent.w2"].astype(np.float64).T + a["ent.b2"].astype(np.float64)
    alpha = out[:, 0]
    beta = BETA_FLOOR + softplus(out[:, 1])
    if with_cache:
        return alpha, beta, (ctx, h_pre, h, out)
    return alpha, beta


def backward_params(psi: EntropyModelParams, cache, d_alpha: np.ndarray,
                    d_beta: np.ndarray) -> dict[str, np.ndarray]:
    a = psi.arrays
    ctx, h_pre, h, out = cache
    d_out = np.stack([d_alpha, d_beta * softplus_grad(out[:, 1])], axis=1)
    grads = {
        "ent.w2": d_out.T @ h,
        "ent.b2": d_out.sum(axis=0),
    }
    dh = d_out @ a["ent.w2"].astype(np.float64)
    dh_pre = dh * gelu_grad(h_pre)
    grads["ent.w1"] = dh_pre.T @ ctx
    grads["ent.b1"] = dh_pre.sum(axis=0)
    return grads


def raw_logistic_pmf(codes: np.ndarray, alpha, beta, q_max: int,
                     absorb: bool = True) -> np.ndarray:
    """Tail-absorbed bin probabilities (no flooring); exact normalization over support."""
    c = np.asarray(codes, dtype=np.float64)
    hi = sigmoid((c + 0.5 - alpha) / beta)
    lo = sigmoid((c - 0.5 - alpha) / beta)
    p = hi - lo
    if absorb:
        p = np.where(c <= -q_max, hi, p)
        p = np.where(c >= q_max, 1.0 - lo, p)
    return p


def pmf_table(alpha: np.ndarray, beta: np.ndarray, q_max: int) -> np.ndarray:
    """(m, 2*q_max+1) floored, renormalized tables over support [-q_max, q_max]."""
    support = np.arange(-q_max, q_max + 1, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)[:, None]
    b = np.asarray(beta, dtype=np.float64)[:, None]
    hi = sigmoid((support[None, :] + 0.5 - a) / b)
    lo = sigmoid((support[None, :] - 0.5 - a) / b)
    p = hi - lo
    p[:, 0] = hi[:, 0]
    p[:, -1] = 1.0 - lo[:, -1]
    p = np.maximum(p, P_MIN)
    return p / p.sum(axis=1, keepdims=True)


def logistic_pmf(code: int, alpha: float, beta: float, q_max: int) -> float:
    """Probability of one code under the floored, renormalized table."""
    if not (-q_max <= code <= q_max):
        raise OutOfSupport(f"code {code} outside support [-{q_max}, {q_max}]")
    if beta < BETA_FLOOR:
        beta = BETA_FLOOR
    table = pmf_table(np.array([alpha]), np.array([beta]), q_max)
    return float(table[0, code + q_max])


def codelength_proxy(symbols: np.ndarray, group_idx: np.ndarray,
                     tables: np.ndarray, q_max: int) -> float:
    """Ideal codelength in bits under the floored tables: sum of -log2 p."""
    symbols = np.asarray(symbols, dtype=np.int64)
    p = tables[np.asarray(group_idx, dtype=np.int64), symbols + q_max]
    return float(-np.log2(p).sum())


def nll_and_grads(symbols: np.ndarray, group_idx: np.ndarray, alpha: np.ndarray,
                  beta: np.ndarray, q_max_per_group: np.ndarray):
    """Mean NLL in nats over symbols, with d/dalpha and d/dbeta per group."""
    c = np.asarray(symbols, dtype=np.float64)
    gi = np.asarray(group_idx, dtype=np.int64)
    a = alpha[gi]
    b = beta[gi]
    q = q_max_per_group[gi].astype(np.float64)
    xa = (c + 0.5 - a) / b
    xb = (c - 0.5 - a) / b
    sa = sigmoid(xa)
    sb = sigmoid(xb)
    low = c <= -q
    high = c >= q
    p = sa - sb
    p = np.where(low, sa, p)
    p = np.where(high, 1.0 - sb, p)
    p = np.maximum(p, 1e-30)
    sa_d = sa * (1.0 - sa)
    sb_d = sb * (1.0 - sb)
    # d p / d alpha and d p / d beta per absorption case
    dpda = (sb_d - sa_d) / b
    dpda = np.where(low, -sa_d / b, dpda)
    dpda = np.where(high, sb_d / b, dpda)
    dpdb = (xb * sb_d - xa * sa_d) / b
    dpdb = np.where(low, -xa * sa_d / b, dpdb)
    dpdb = np.where(high, xb * sb_d / b, dpdb)
    n = len(c)
    nll = float(-np.log(p).mean())
    coef = -1.0 / (p * n)
    d_alpha = np.zeros_like(alpha)
    d_beta = np.zeros_like(beta)
    np.add.at(d_alpha, gi, coef * dpda)
    np.add.at(d_beta, gi, coef * dpdb)
    return nll, d_alpha, d_beta


@dataclass
class EntropyFitConfig:
    steps: int = 300
    lr: float = 1e-2
    warmup_steps: int = 30
    seed: int = 0
    max_symbols: int = 200_000


def fit_entropy_model(symbols: np.ndarray, group_idx: np.ndarray, ctx: np.ndarray,
                      q_max_per_group: np.ndarray, cfg: EntropyFitConfig,
                      psi: EntropyModelParams | None = None
                      ) -> tuple[EntropyModelParams, list[float]]:
    """Fit the context MLP by full-batch AdamW on the code NLL; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    symbols = np.asarray(symbols, dtype=np.int64)
    group_idx = np.asarray(group_idx, dtype=np.int64)
    ctx = np.asarray(ctx, dtype=np.float64)
    q_max_per_group = np.asarray(q_max_per_group, dtype=np.int64)
    if psi is None:
        psi = EntropyModelParams.init(ctx.shape[1], rng)
    if len(symbols) == 0:
        return psi, []
    if len(symbols) > cfg.max_symbols:
        stride = len(symbols) // cfg.max_symbols + 1
        symbols = symbols[::stride]
        group_idx = group_idx[::stride]
    opt = AdamW(psi.arrays, lr=cfg.lr, weight_decay=0.0,
                warmup_steps=cfg.warmup_steps, total_steps=cfg.steps)
    history: list[float] = []
    for _ in range(cfg.steps):
        alpha, beta, cache = eval_params(psi, ctx, with_cache=True)
        nll, d_alpha, d_beta = nll_and_grads(symbols, group_idx, alpha, beta,
                                             q_max_per_group)
        if not np.isfinite(nll):
            raise NonFiniteLoss(f"entropy model NLL became non-finite at step {len(history)}")
        history.append(nll)
        grads = backward_params(psi, cache, d_alpha, d_beta)
        grads = clip_global_norm(grads, 10.0)
        opt.step(grads)
    return psi, history
