"""Encoder-only transformer over per-visit temporal features.

Variable-length visit histories are processed in a packed layout: the rows of
every sequence in a batch are concatenated into one (N, d) matrix so that
position-wise operations (projections, feed-forward, normalization) run as
single matrix products while attention is evaluated per segment. Trailing
padding is trimmed before any arithmetic, which makes the encoder output
bitwise independent of how much padding a caller appends.

All forward functions have hand-written backward counterparts; gradients are
verified against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .params import ParameterStore, uniform_fan_in
from .records import ValidationError

NORM_LAYER = "layer"
NORM_BATCH = "batch"
ACT_GELU = "gelu"
ACT_RELU = "relu"

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))
_NORM_EPS = 1e-5
_BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class TSTConfig:
    n_features: int = 2      # per-visit inputs: (duration, gap)
    max_len: int = 16        # longest history the encoder accepts
    d_model: int = 64
    n_heads: int = 8
    n_layers: int = 3
    d_ff: int = 256
    dropout: float = 0.1
    norm: str = NORM_LAYER   # "layer" or "batch"
    activation: str = ACT_GELU

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def validate_tst_config(cfg: TSTConfig) -> None:
    if cfg.n_features < 1:
        raise ValidationError("n_features must be >= 1")
    if cfg.max_len < 1:
        raise ValidationError("max_len must be >= 1")
    if cfg.d_model < 1 or cfg.d_model % cfg.n_heads != 0:
        raise ValidationError(
            f"d_model ({cfg.d_model}) must be a positive multiple of n_heads ({cfg.n_heads})"
        )
    if cfg.n_layers < 0:
        raise ValidationError("n_layers must be >= 0")
    if cfg.d_ff < 1:
        raise ValidationError("d_ff must be >= 1")
    if not 0.0 <= cfg.dropout < 1.0:
        raise ValidationError(f"dropout must be in [0, 1), got {cfg.dropout}")
    if cfg.norm not in (NORM_LAYER, NORM_BATCH):
        raise ValidationError(f"unknown norm {cfg.norm!r}")
    if cfg.activation not in (ACT_GELU, ACT_RELU):
        raise ValidationError(f"unknown activation {cfg.activation!r}")


def init_tst_params(store: ParameterStore, cfg: TSTConfig, rng: np.random.Generator) -> None:
    """Register every encoder weight (and batch-norm state when configured)."""
    d, m = cfg.d_model, cfg.n_features
    store.add("tst.in_w", uniform_fan_in(rng, (d, m), m))
    store.add("tst.in_b", np.zeros(d))
    for li in range(cfg.n_layers):
        p = f"tst.l{li}."
        for mat in ("attn_wq", "attn_wk", "attn_wv", "attn_wo"):
            store.add(p + mat, uniform_fan_in(rng, (d, d), d))
        for vec in ("attn_bq", "attn_bk", "attn_bv", "attn_bo"):
            store.add(p + vec, np.zeros(d))
        store.add(p + "norm1_g", np.ones(d))
        store.add(p + "norm1_b", np.zeros(d))
        store.add(p + "ffn_w1", uniform_fan_in(rng, (cfg.d_ff, d), d))
        store.add(p + "ffn_b1", np.zeros(cfg.d_ff))
        store.add(p + "ffn_w2", uniform_fan_in(rng, (d, cfg.d_ff), cfg.d_ff))
        store.add(p + "ffn_b2", np.zeros(d))
        store.add(p + "norm2_g", np.ones(d))
        store.add(p + "norm2_b", np.zeros(d))
        if cfg.norm == NORM_BATCH:
            store.add(p + "norm1_rmean", np.zeros(d), trainable=False)
            store.add(p + "norm1_rvar", np.ones(d), trainable=False)
            store.add(p + "norm2_rmean", np.zeros(d), trainable=False)
            store.add(p + "norm2_rvar", np.ones(d), trainable=False)
    store.add("tst.out_w", uniform_fan_in(rng, (d, d), d))
    store.add("tst.out_b", np.zeros(d))


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table, row t for the t-th visit in a history."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, idx / float(dim))
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table


def embed_inputs(
    x_scaled: np.ndarray, w_in: np.ndarray, b_in: np.ndarray, pos_table: np.ndarray
) -> np.ndarray:
    """Project scaled (w, m) inputs to (w, d) and add positional encoding.

    Histories longer than the positional table are an error; callers keep the
    most recent max_len visits.
    """
    x_scaled = np.asarray(x_scaled, dtype=np.float64)
    if x_scaled.ndim != 2 or x_scaled.shape[1] != w_in.shape[1]:
        raise ValidationError(
            f"input shape {x_scaled.shape} incompatible with projection {w_in.shape}"
        )
    w = x_scaled.shape[0]
    if w > pos_table.shape[0]:
        raise ValidationError(
            f"history length {w} exceeds max_len {pos_table.shape[0]}; "
            "truncate to the most recent visits first"
        )
    return x_scaled @ w_in.T + b_in + pos_table[:w]


# Activations


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0.0).astype(np.float64)


def _activation(name: str):
    return (gelu, gelu_grad) if name == ACT_GELU else (relu, relu_grad)


# Scaled dot-product attention (single head)


def attention_weights(
    q: np.ndarray, k: np.ndarray, key_mask: np.ndarray | None = None
) -> np.ndarray:
    """Row-stochastic softmax(q k^T / sqrt(d_k)) over unmasked key positions.

    Rows are all-zero when every key is masked (total by convention; cannot
    occur for valid histories).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ValidationError(f"incompatible attention shapes q{q.shape} k{k.shape}")
    scores = q @ k.T / np.sqrt(float(q.shape[1]))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (k.shape[0],):
            raise ValidationError(
                f"key mask shape {key_mask.shape} does not match {k.shape[0]} keys"
            )
        if not key_mask.any():
            return np.zeros((q.shape[0], k.shape[0]), dtype=np.float64)
        scores = np.where(key_mask[None, :], scores, -np.inf)
    shifted = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    if key_mask is not None:
        weights[:, ~key_mask] = 0.0
    return weights / weights.sum(axis=1, keepdims=True)


def attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, key_mask: np.ndarray | None = None
) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != k.shape[0]:
        raise ValidationError(f"value rows {v.shape[0]} != key rows {k.shape[0]}")
    return attention_weights(q, k, key_mask) @ v


def _attention_backward(d_out, weights, q, k, v, scale):
    """Backward through out = softmax(q k^T * scale) v for one head."""
    d_weights = d_out @ v.T
    d_v = weights.T @ d_out
    # softmax rows: ds = w * (dw - sum_j w_j dw_j); all-zero rows stay zero
    d_scores = weights * (d_weights - (d_weights * weights).sum(axis=1, keepdims=True))
    d_q = d_scores @ k * scale
    d_k = d_scores.T @ q * scale
    return d_q, d_k, d_v


# Normalization


def layer_norm_forward(x, gamma, beta, eps=_NORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(d_y, cache):
    xhat, inv, gamma = cache
    d_gamma = (d_y * xhat).sum(axis=0)
    d_beta = d_y.sum(axis=0)
    d_xhat = d_y * gamma
    d_x = inv * (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True)
    )
    return d_x, d_gamma, d_beta


def batch_norm_forward(
    x, gamma, beta, valid, running_mean, running_var, train_mode, eps=_NORM_EPS
):
    """Channel-wise normalization over the valid rows of a packed batch.

    Train mode uses batch statistics over valid rows and updates the running
    buffers in place; eval mode normalizes every row with the running values.
    """
    if train_mode:
        n = int(valid.sum())
        if n == 0:
            raise ValidationError("batch norm saw a batch with no valid rows")
        mu = x[valid].mean(axis=0)
        var = x[valid].var(axis=0)
        running_mean *= 1.0 - _BN_MOMENTUM
        running_mean += _BN_MOMENTUM * mu
        running_var *= 1.0 - _BN_MOMENTUM
        running_var += _BN_MOMENTUM * var
    else:
        n = 0
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma, valid, n, train_mode)


def batch_norm_backward(d_y, cache):
    xhat, inv, gamma, valid, n, train_mode = cache
    d_gamma = (d_y * xhat).sum(axis=0)
    d_beta = d_y.sum(axis=0)
    d_xhat = d_y * gamma
    if not train_mode:
        return d_xhat * inv, d_gamma, d_beta
    # statistics come from the n valid rows but every row was normalized, so
    # the mean/variance sums run over all rows while the 1/n redistribution
    # applies to valid rows only
    s1 = d_xhat.sum(axis=0)
    s2 = (d_xhat * xhat).sum(axis=0)
    d_x = d_xhat * inv
    correction = -(inv / n) * (s1 + xhat * s2)
    d_x = d_x + np.where(valid[:, None], correction, 0.0)
    return d_x, d_gamma, d_beta


# Feed-forward block


def ffn_forward(x, w1, b1, w2, b2, activation):
    act_fn, _ = _activation(activation)
    pre = x @ w1.T + b1
    hidden = act_fn(pre)
    return hidden @ w2.T + b2, (x, pre, hidden)


def ffn_backward(d_y, cache, w1, w2, activation):
    _, act_grad = _activation(activation)
    x, pre, hidden = cache
    d_w2 = d_y.T @ hidden
    d_b2 = d_y.sum(axis=0)
    d_hidden = d_y @ w2
    d_pre = d_hidden * act_grad(pre)
    d_w1 = d_pre.T @ x
    d_b1 = d_pre.sum(axis=0)
    d_x = d_pre @ w1
    return d_x, d_w1, d_b1, d_w2, d_b2


# Packed batching


@dataclass
class PackedBatch:
    rows: np.ndarray       # (N, ·) concatenated sequence rows
    lengths: np.ndarray    # (B,) rows per sequence
    offsets: np.ndarray    # (B+1,) prefix sums into rows
    valid: np.ndarray      # (N,) rows that enter attention keys/statistics/pooling

    def segments(self):
        for b in range(len(self.lengths)):
            yield int(self.offsets[b]), int(self.offsets[b + 1])


def pack_sequences(arrays: list[np.ndarray], valids: list[np.ndarray] | None = None) -> PackedBatch:
    if not arrays:
        raise ValidationError("cannot pack an empty batch")
    lengths = np.asarray([a.shape[0] for a in arrays], dtype=np.int64)
    if (lengths == 0).any():
        raise ValidationError("cannot pack a zero-length history")
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    rows = np.concatenate([np.ascontiguousarray(a, dtype=np.float64) for a in arrays], axis=0)
    if valids is None:
        valid = np.ones(rows.shape[0], dtype=bool)
    else:
        valid = np.concatenate([np.asarray(v, dtype=bool) for v in valids])
    return PackedBatch(rows=rows, lengths=lengths, offsets=offsets, valid=valid)


def _mha_forward(x, packed, store, prefix, cfg):
    wq, bq = store[prefix + "attn_wq"], store[prefix + "attn_bq"]
    wk, bk = store[prefix + "attn_wk"], store[prefix + "attn_bk"]
    wv, bv = store[prefix + "attn_wv"], store[prefix + "attn_bv"]
    wo, bo = store[prefix + "attn_wo"], store[prefix + "attn_bo"]
    q_all = x @ wq.T + bq
    k_all = x @ wk.T + bk
    v_all = x @ wv.T + bv
    ctx = np.empty_like(x)
    dh = cfg.d_head
    weights_per_seg = []
    for s, e in packed.segments():
        mask = packed.valid[s:e]
        head_weights = []
        for h in range(cfg.n_heads):
            cols = slice(h * dh, (h + 1) * dh)
            w = attention_weights(q_all[s:e, cols], k_all[s:e, cols], mask)
            ctx[s:e, cols] = w @ v_all[s:e, cols]
            head_weights.append(w)
        weights_per_seg.append(head_weights)
    out = ctx @ wo.T + bo
    return out, (x, q_all, k_all, v_all, ctx, weights_per_seg)


def _mha_backward(d_out, cache, packed, store, prefix, cfg):
    x, q_all, k_all, v_all, ctx, weights_per_seg = cache
    wq = store[prefix + "attn_wq"]
    wk = store[prefix + "attn_wk"]
    wv = store[prefix + "attn_wv"]
    wo = store[prefix + "attn_wo"]
    store.grad(prefix + "attn_wo")[...] += d_out.T @ ctx
    store.grad(prefix + "attn_bo")[...] += d_out.sum(axis=0)
    d_ctx = d_out @ wo
    d_q = np.zeros_like(q_all)
    d_k = np.zeros_like(k_all)
    d_v = np.zeros_like(v_all)
    dh = cfg.d_head
    scale = 1.0 / np.sqrt(float(dh))
    for (s, e), head_weights in zip(packed.segments(), weights_per_seg):
        for h in range(cfg.n_heads):
            cols = slice(h * dh, (h + 1) * dh)
            dq, dk, dv = _attention_backward(
                d_ctx[s:e, cols],
                head_weights[h],
                q_all[s:e, cols],
                k_all[s:e, cols],
                v_all[s:e, cols],
                scale,
            )
            d_q[s:e, cols] = dq
            d_k[s:e, cols] = dk
            d_v[s:e, cols] = dv
    store.grad(prefix + "attn_wq")[...] += d_q.T @ x
    store.grad(prefix + "attn_bq")[...] += d_q.sum(axis=0)
    store.grad(prefix + "attn_wk")[...] += d_k.T @ x
    store.grad(prefix + "attn_bk")[...] += d_k.sum(axis=0)
    store.grad(prefix + "attn_wv")[...] += d_v.T @ x
    store.grad(prefix + "attn_bv")[...] += d_v.sum(axis=0)
    return d_q @ wq + d_k @ wk + d_v @ wv


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate).astype(np.float64) / (1.0 - rate)


def _norm_forward(x, packed, store, name, cfg, train_mode):
    gamma, beta = store[name + "_g"], store[name + "_b"]
    if cfg.norm == NORM_LAYER:
        return layer_norm_forward(x, gamma, beta)
    return batch_norm_forward(
        x,
        gamma,
        beta,
        packed.valid,
        store[name + "_rmean"],
        store[name + "_rvar"],
        train_mode,
    )


def _norm_backward(d_y, cache, store, name, cfg):
    backward = layer_norm_backward if cfg.norm == NORM_LAYER else batch_norm_backward
    d_x, d_gamma, d_beta = backward(d_y, cache)
    store.grad(name + "_g")[...] += d_gamma
    store.grad(name + "_b")[...] += d_beta
    return d_x


def encoder_stack_forward(packed: PackedBatch, store, cfg: TSTConfig, train_mode, rng):
    """Run the n_layers of attention/FFN blocks over packed rows.

    Block layout per layer: self-attention, residual, norm, feed-forward,
    residual, norm, with dropout after the attention output and after the FFN
    in train mode.
    """
    use_dropout = train_mode and cfg.dropout > 0.0
    if use_dropout and rng is None:
        raise ValidationError("train-mode dropout requires an RNG")
    x = packed.rows
    layer_caches = []
    for li in range(cfg.n_layers):
        prefix = f"tst.l{li}."
        attn_out, attn_cache = _mha_forward(x, packed, store, prefix, cfg)
        drop1 = _dropout_mask(rng, attn_out.shape, cfg.dropout) if use_dropout else None
        if drop1 is not None:
            attn_out = attn_out * drop1
        res1 = x + attn_out
        normed1, ncache1 = _norm_forward(res1, packed, store, prefix + "norm1", cfg, train_mode)
        ffn_out, fcache = ffn_forward(
            normed1,
            store[prefix + "ffn_w1"],
            store[prefix + "ffn_b1"],
            store[prefix + "ffn_w2"],
            store[prefix + "ffn_b2"],
            cfg.activation,
        )
        drop2 = _dropout_mask(rng, ffn_out.shape, cfg.dropout) if use_dropout else None
        if drop2 is not None:
            ffn_out = ffn_out * drop2
        res2 = normed1 + ffn_out
        x, ncache2 = _norm_forward(res2, packed, store, prefix + "norm2", cfg, train_mode)
        layer_caches.append((attn_cache, drop1, ncache1, fcache, drop2, ncache2))
    return x, layer_caches


def encoder_stack_backward(d_x, layer_caches, packed, store, cfg: TSTConfig):
    for li in reversed(range(cfg.n_layers)):
        prefix = f"tst.l{li}."
        attn_cache, drop1, ncache1, fcache, drop2, ncache2 = layer_caches[li]
        d_res2 = _norm_backward(d_x, ncache2, store, prefix + "norm2", cfg)
        d_ffn_out = d_res2 if drop2 is None else d_res2 * drop2
        d_normed1, d_w1, d_b1, d_w2, d_b2 = ffn_backward(
            d_ffn_out, fcache, store[prefix + "ffn_w1"], store[prefix + "ffn_w2"], cfg.activation
        )
        store.grad(prefix + "ffn_w1")[...] += d_w1
        store.grad(prefix + "ffn_b1")[...] += d_b1
        store.grad(prefix + "ffn_w2")[...] += d_w2
        store.grad(prefix + "ffn_b2")[...] += d_b2
        d_normed1 = d_normed1 + d_res2
        d_res1 = _norm_backward(d_normed1, ncache1, store, prefix + "norm1", cfg)
        d_attn_out = d_res1 if drop1 is None else d_res1 * drop1
        d_x = d_res1 + _mha_backward(d_attn_out, attn_cache, packed, store, prefix, cfg)
    return d_x


def masked_mean_forward(rows, packed: PackedBatch):
    """Mean over each segment's valid rows -> (B, d)."""
    pooled = np.empty((len(packed.lengths), rows.shape[1]), dtype=np.float64)
    counts = np.empty(len(packed.lengths), dtype=np.int64)
    for b, (s, e) in enumerate(packed.segments()):
        mask = packed.valid[s:e]
        n = int(mask.sum())
        if n == 0:
            raise ValidationError(f"sequence {b} has no unmasked steps to pool")
        counts[b] = n
        pooled[b] = rows[s:e][mask].sum(axis=0) / n
    return pooled, counts


def masked_mean_backward(d_pooled, packed: PackedBatch, counts, n_cols):
    d_rows = np.zeros((packed.rows.shape[0], n_cols), dtype=np.float64)
    for b, (s, e) in enumerate(packed.segments()):
        mask = packed.valid[s:e]
        d_rows[s:e][mask] = d_pooled[b] / counts[b]
    return d_rows


def project_output(z_tilde: np.ndarray, w_o: np.ndarray, b_o: np.ndarray) -> np.ndarray:
    """Final affine map from the pooled encoding to the temporal embedding."""
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    if z_tilde.shape[-1] != w_o.shape[1]:
        raise ValidationError(
            f"pooled encoding width {z_tilde.shape[-1]} does not match {w_o.shape}"
        )
    return z_tilde @ w_o.T + b_o


def _trim_trailing(u: np.ndarray, mask: np.ndarray):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (u.shape[0],):
        raise ValidationError(f"mask shape {mask.shape} does not match {u.shape[0]} steps")
    if not mask.any():
        raise ValidationError("sequence is entirely masked")
    w_real = int(np.max(np.nonzero(mask)[0])) + 1
    return np.ascontiguousarray(u[:w_real]), mask[:w_real]


def encoder_forward(
    u: np.ndarray,
    mask: np.ndarray,
    store: ParameterStore,
    cfg: TSTConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Single-sequence encoder: blocks over the unmasked steps of u (w, d),
    then a masked mean over time. Returns the pooled vector of width d."""
    u = np.asarray(u, dtype=np.float64)
    rows, valid = _trim_trailing(u, mask)
    packed = pack_sequences([rows], [valid])
    if cfg.n_layers > 0:
        out_rows, _ = encoder_stack_forward(packed, store, cfg, train_mode, rng)
    else:
        out_rows = packed.rows
    pooled, _ = masked_mean_forward(out_rows, packed)
    return pooled[0]


def tst_forward(
    histories: list[np.ndarray],
    store: ParameterStore,
    cfg: TSTConfig,
    pos_table: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
):
    """Whole temporal pathway for a batch of scaled histories -> (B, d)."""
    w_in, b_in = store["tst.in_w"], store["tst.in_b"]
    embedded = [embed_inputs(h, w_in, b_in, pos_table) for h in histories]
    packed_x = pack_sequences([np.asarray(h, dtype=np.float64) for h in histories])
    packed_u = PackedBatch(
        rows=np.concatenate(embedded, axis=0),
        lengths=packed_x.lengths,
        offsets=packed_x.offsets,
        valid=packed_x.valid,
    )
    if cfg.n_layers > 0:
        out_rows, layer_caches = encoder_stack_forward(packed_u, store, cfg, train_mode, rng)
    else:
        out_rows, layer_caches = packed_u.rows, []
    pooled, counts = masked_mean_forward(out_rows, packed_u)
    z_b = pooled @ store["tst.out_w"].T + store["tst.out_b"]
    cache = (packed_x, packed_u, layer_caches, pooled, counts)
    return z_b, cache


def tst_backward(d_zb, cache, store: ParameterStore, cfg: TSTConfig) -> None:
    packed_x, packed_u, layer_caches, pooled, counts = cache
    store.grad("tst.out_w")[...] += d_zb.T @ pooled
    store.grad("tst.out_b")[...] += d_zb.sum(axis=0)
    d_pooled = d_zb @ store["tst.out_w"]
    d_rows = masked_mean_backward(d_pooled, packed_u, counts, cfg.d_model)
    if cfg.n_layers > 0:
        d_rows = encoder_stack_backward(d_rows, layer_caches, packed_u, store, cfg)
    store.grad("tst.in_w")[...] += d_rows.T @ packed_x.rows
    store.grad("tst.in_b")[...] += d_rows.sum(axis=0)
