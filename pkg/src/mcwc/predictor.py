"""Layer-sequential block predictor with layer/type conditioning, plus training.

Pipeline per block of type t at layer l (row-vector convention):
    z    = vec(prev) @ P_t.T + p_t
    zbar = z + E_layer[l] @ A_l.T + E_type[t] @ A_t.T
    h    = zbar + W2 @ gelu(W1 @ zbar + b1) + b2     (residual core MLP)
    yhat = h @ O_t.T + o_t

P_t/O_t are copy-initialized (O_t P_t = I on the block subspace) and the core
MLP's last layer starts at zero, so the untrained predictor reproduces the
previous block. Training is full-batch AdamW with a prediction-only phase
followed by a joint phase where rounding is relaxed to uniform noise and the
rate term is the discretized-logistic NLL of the noisy codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import entropy as ent
from .errors import LayerIndexOutOfRange, NonFiniteLoss, ShapeMismatch, UnknownType
from .nnops import AdamW, clip_global_norm, gelu, gelu_grad, orthonormal_columns, sigmoid

D_LAT_DEFAULT = 256
D_EMB_DEFAULT = 64


@dataclass
class TrainConfig:
    steps: int = 3000
    pred_phase_steps: int = 2000  # prediction-only phase before joint optimization
    lr: float = 1e-3
    weight_decay: float = 1e-2
    warmup_steps: int = 500
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class PredictorParams:
    n_layers: int
    d_lat: int
    d_emb: int
    type_ids: list[int]            # all types, in embedding-row order
    type_dims: dict[int, int]      # aligned (predictable) types only
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def type_row(self, type_id: int) -> int:
        try:
            return self.type_ids.index(type_id)
        except ValueError:
            raise UnknownType(f"type {type_id} not registered") from None

    def published(self) -> "PredictorParams":
        return PredictorParams(
            n_layers=self.n_layers, d_lat=self.d_lat, d_emb=self.d_emb,
            type_ids=list(self.type_ids), type_dims=dict(self.type_dims),
            arrays={k: v.astype(np.float32) for k, v in self.arrays.items()})


def init_predictor(n_layers: int, type_ids: list[int], type_dims: dict[int, int],
                   d_lat: int = D_LAT_DEFAULT, d_emb: int = D_EMB_DEFAULT,
                   seed: int = 0) -> PredictorParams:
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {
        "emb.layer": 0.1 * rng.standard_normal((n_layers, d_emb)),
        "emb.type": 0.1 * rng.standard_normal((max(len(type_ids), 1), d_emb)),
        "a.layer": np.zeros((d_lat, d_emb)),
        "a.type": np.zeros((d_lat, d_emb)),
        "core.w1": rng.standard_normal((4 * d_lat, d_lat)) / np.sqrt(d_lat),
        "core.b1": np.zeros(4 * d_lat),
        "core.w2": np.zeros((d_lat, 4 * d_lat)),  # zero last layer: start as a copy
        "core.b2": np.zeros(d_lat),
    }
    for t, dt in sorted(type_dims.items()):
        if dt <= d_lat:
            q = orthonormal_columns(d_lat, dt, rng)
            arrays[f"in.{t}.w"] = q
            arrays[f"out.{t}.w"] = q.T.copy()
        else:
            w = rng.standard_normal((d_lat, dt)) / np.sqrt(dt)
            arrays[f"in.{t}.w"] = w
            arrays[f"out.{t}.w"] = np.linalg.pinv(w)
        arrays[f"in.{t}.b"] = np.zeros(d_lat)
        arrays[f"out.{t}.b"] = np.zeros(dt)
    return PredictorParams(n_layers=n_layers, d_lat=d_lat, d_emb=d_emb,
                           type_ids=list(type_ids), type_dims=dict(type_dims),
                           arrays=arrays)


def forward_type(params: PredictorParams, type_id: int, prev: np.ndarray,
                 layer_rows: np.ndarray, with_cache: bool = False):
    """Batched prediction for one type; prev is (n, d_t), layer_rows holds 0-based
    embedding rows of the layers being predicted."""
    a = params.arrays
    trow = params.type_row(type_id)
    dt = params.type_dims.get(type_id)
    if dt is None:
        raise UnknownType(f"type {type_id} has no predictor projections")
    if prev.ndim != 2 or prev.shape[1] != dt:
        raise ShapeMismatch(f"type {type_id} blocks have dim {prev.shape}, expected (n, {dt})")
    dtype = a["core.w1"].dtype
    prev = np.asarray(prev, dtype=dtype)
    z = prev @ a[f"in.{type_id}.w"].T + a[f"in.{type_id}.b"]
    e_l = a["emb.layer"][layer_rows]
    e_t = a["emb.type"][trow]
    cond = e_l @ a["a.layer"].T + e_t @ a["a.type"].T
    zbar = z + cond
    h1 = zbar @ a["core.w1"].T + a["core.b1"]
    g = gelu(h1)
    m = g @ a["core.w2"].T + a["core.b2"]
    h = zbar + m
    yhat = h @ a[f"out.{type_id}.w"].T + a[f"out.{type_id}.b"]
    if with_cache:
        return yhat, (prev, layer_rows, z, e_l, zbar, h1, g, h)
    return yhat


def backward_type(params: PredictorParams, type_id: int, cache, d_yhat: np.ndarray,
                  grads: dict[str, np.ndarray]) -> None:
    """Accumulate gradients for one type's batch into grads."""
    a = params.arrays
    trow = params.type_row(type_id)
    prev, layer_rows, z, e_l, zbar, h1, g, h = cache

    def acc(key, val):
        if key in grads:
            grads[key] += val
        else:
            grads[key] = val

    acc(f"out.{type_id}.w", d_yhat.T @ h)
    acc(f"out.{type_id}.b", d_yhat.sum(axis=0))
    dh = d_yhat @ a[f"out.{type_id}.w"]
    dm = dh
    acc("core.w2", dm.T @ g)
    acc("core.b2", dm.sum(axis=0))
    dg = dm @ a["core.w2"]
    dh1 = dg * gelu_grad(h1)
    acc("core.w1", dh1.T @ zbar)
    acc("core.b1", dh1.sum(axis=0))
    dzbar = dh + dh1 @ a["core.w1"]
    acc(f"in.{type_id}.w", dzbar.T @ prev)
    acc(f"in.{type_id}.b", dzbar.sum(axis=0))
    acc("a.layer", dzbar.T @ e_l)
    d_el = dzbar @ a["a.layer"]
    g_layer = np.zeros_like(a["emb.layer"])
    np.add.at(g_layer, layer_rows, d_el)
    acc("emb.layer", g_layer)
    e_t = a["emb.type"][trow]
    acc("a.type", dzbar.sum(axis=0)[:, None] @ e_t[None, :])
    g_type = np.zeros_like(a["emb.type"])
    g_type[trow] = (dzbar @ a["a.type"]).sum(axis=0)
    acc("emb.type", g_type)


def predict_block(prev_block: np.ndarray, layer: int, type_id: int,
                  params: PredictorParams) -> np.ndarray:
    """Deterministic single-block prediction of layer `layer` from the decoded
    block at `layer - 1`."""
    if layer < 2 or layer > params.n_layers:
        raise LayerIndexOutOfRange(f"cannot predict layer {layer} of {params.n_layers}")
    flat = np.asarray(prev_block).reshape(1, -1)
    row = np.array([layer - 1], dtype=np.int64)
    yhat = forward_type(params, type_id, flat, row)
    return yhat.reshape(np.asarray(prev_block).shape)


def predict_batch(prev_blocks: np.ndarray, layer: int, type_id: int,
                  params: PredictorParams) -> np.ndarray:
    """All blocks of one record at once; identical math to predict_block."""
    if layer < 2 or layer > params.n_layers:
        raise LayerIndexOutOfRange(f"cannot predict layer {layer} of {params.n_layers}")
    rows = np.full(prev_blocks.shape[0], layer - 1, dtype=np.int64)
    return forward_type(params, type_id, prev_blocks, rows)


@dataclass
class TypeSamples:
    """Training stream for one type: context blocks, aligned targets, and the
    per-block provisional quantizer step used by the joint phase."""

    type_id: int
    context: np.ndarray     # (n, d_t)
    target: np.ndarray      # (n, d_t)
    layer_rows: np.ndarray  # (n,) 0-based rows of the predicted layers
    steps: np.ndarray       # (n,)


def _mse_pass(params: PredictorParams, samples: list[TypeSamples],
              want_grads: bool = True):
    total_elems = sum(s.target.size for s in samples)
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for s in samples:
        yhat, cache = forward_type(params, s.type_id, s.context, s.layer_rows,
                                   with_cache=True)
        diff = yhat - s.target
        loss += float(np.sum(diff * diff))
        if want_grads:
            backward_type(params, s.type_id, cache, 2.0 * diff / total_elems, grads)
    return loss / total_elems, grads


def _joint_pass(params: PredictorParams, psi: ent.EntropyModelParams,
                samples: list[TypeSamples], lam: float, q_max: int,
                rng: np.random.Generator):
    """Distortion (clip excess under the noise relaxation) + lambda * NLL bits."""
    total_elems = sum(s.target.size for s in samples)
    grads: dict[str, np.ndarray] = {}
    loss_d = 0.0
    loss_r = 0.0
    for s in samples:
        yhat, cache = forward_type(params, s.type_id, s.context, s.layer_rows,
                                   with_cache=True)
        r = s.target - yhat
        st = s.steps[:, None]
        u = rng.uniform(-0.5, 0.5, size=r.shape) * st
        noisy = r + u
        clipped = np.clip(noisy, -q_max * st, q_max * st)
        diff = r - clipped
        loss_d += float(np.sum(diff * diff))
        d_r = 2.0 * diff * (noisy != clipped) / total_elems

        # entropy context: stats of the prediction, treated as constants here
        trow = params.type_row(s.type_id)
        feats = np.zeros((r.shape[0], ent.N_FEATURES))
        feats[:, 0] = np.log2(s.steps)
        feats[:, 1] = yhat.mean(axis=1)
        feats[:, 2] = yhat.std(axis=1)
        e_l = params.arrays["emb.layer"][s.layer_rows]
        e_t = np.broadcast_to(params.arrays["emb.type"][trow],
                              (r.shape[0], params.d_emb))
        ctx = np.concatenate([e_l, e_t, feats], axis=1)
        alpha, beta, p_cache = ent.eval_params(psi, ctx, with_cache=True)
        codes = noisy / st
        n = codes.size
        gi = np.repeat(np.arange(r.shape[0]), r.shape[1])
        qvec = np.full(r.shape[0], q_max, dtype=np.int64)
        nll, d_alpha, d_beta, d_code = _nll_with_code_grad(
            codes.ravel(), gi, alpha, beta, qvec)
        loss_r += nll * n
        pgrads = ent.backward_params(psi, p_cache, lam * d_alpha * (n / total_elems),
                                     lam * d_beta * (n / total_elems))
        for k, v in pgrads.items():
            grads[k] = grads.get(k, 0.0) + v
        d_r = d_r + lam * (d_code.reshape(r.shape) / st) * (n / total_elems)
        backward_type(params, s.type_id, cache, -d_r, grads)
    loss = loss_d / total_elems + lam * loss_r / total_elems
    return loss, grads


def _nll_with_code_grad(codes, group_idx, alpha, beta, q_max_per_group):
    """Continuous-code variant of the entropy NLL that also returns d/dcode."""
    c = np.asarray(codes, dtype=np.float64)
    gi = np.asarray(group_idx, dtype=np.int64)
    a = alpha[gi]
    b = beta[gi]
    xa = (c + 0.5 - a) / b
    xb = (c - 0.5 - a) / b
    sa = sigmoid(xa)
    sb = sigmoid(xb)
    p = np.maximum(sa - sb, 1e-30)
    sa_d = sa * (1.0 - sa)
    sb_d = sb * (1.0 - sb)
    n = len(c)
    nll = float(-np.log(p).mean())
    coef = -1.0 / (p * n)
    dpda = (sb_d - sa_d) / b
    dpdb = (xb * sb_d - xa * sa_d) / b
    dpdc = (sa_d - sb_d) / b
    d_alpha = np.zeros_like(alpha)
    d_beta = np.zeros_like(beta)
    np.add.at(d_alpha, gi, coef * dpda)
    np.add.at(d_beta, gi, coef * dpdb)
    return nll, d_alpha, d_beta, coef * dpdc * n


def train_predictor(params: PredictorParams, samples: list[TypeSamples],
                    cfg: TrainConfig, lam: float = 0.0,
                    psi: ent.EntropyModelParams | None = None,
                    q_max: int = 127) -> tuple[PredictorParams,
                                               ent.EntropyModelParams | None,
                                               list[float]]:
    """Two-phase training; returns (params, psi, per-step loss history)."""
    if cfg.steps == 0 or not samples or all(s.target.size == 0 for s in samples):
        return params, psi, []
    rng = np.random.default_rng(cfg.seed)
    joint = lam > 0.0 and psi is not None
    train_arrays = dict(params.arrays)
    if joint:
        train_arrays.update(psi.arrays)
    # no decay on the copy-structural in/out projections, embeddings, or biases
    decay = {k for k in train_arrays
             if k.startswith("core.w") or k in ("a.layer", "a.type")
             or k.startswith("ent.w")}
    opt = AdamW(train_arrays, lr=cfg.lr, weight_decay=cfg.weight_decay,
                warmup_steps=cfg.warmup_steps, total_steps=cfg.steps)
    history: list[float] = []
    pred_steps = min(cfg.pred_phase_steps, cfg.steps)
    for step in range(cfg.steps):
        if step < pred_steps or not joint:
            loss, grads = _mse_pass(params, samples)
        else:
            loss, grads = _joint_pass(params, psi, samples, lam, q_max, rng)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"training loss became non-finite at step {step}")
        history.append(loss)
        grads = clip_global_norm(grads, cfg.grad_clip)
        opt.step(grads, decay_mask=decay)
    return params, psi, history


def gradient_check(params: PredictorParams, samples: list[TypeSamples],
                   eps: float = 1e-4, n_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic gradients of the prediction-error loss
    and central finite differences over a random coordinate sample (float64)."""
    _, grads = _mse_pass(params, samples)
    rng = np.random.default_rng(seed)
    keys = sorted(grads.keys())
    gmax = max(float(np.abs(g).max()) for g in grads.values())
    floor = max(1e-3 * gmax, 1e-10)
    worst = 0.0
    flat_index = [(k, i) for k in keys for i in range(params.arrays[k].size)]
    pick = rng.choice(len(flat_index), size=min(n_coords, len(flat_index)),
                      replace=False)
    for j in pick:
        k, i = flat_index[j]
        arr = params.arrays[k]
        orig = arr.flat[i]
        arr.flat[i] = orig + eps
        lp, _ = _mse_pass(params, samples, want_grads=False)
        arr.flat[i] = orig - eps
        lm, _ = _mse_pass(params, samples, want_grads=False)
        arr.flat[i] = orig
        fd = (lp - lm) / (2.0 * eps)
        an = grads[k].flat[i]
        rel = abs(an - fd) / max(abs(an), abs(fd), floor)
        worst = max(worst, rel)
    return worst
