"""Autoregressive decoder transformer with hand-written backpropagation.

Two architectures share one code path: ``decoder-absolute`` (learned
positional embeddings, pre-norm LayerNorm, GELU MLP, biases) and
``decoder-rotary`` (rotary position encoding, RMSNorm, gated SiLU MLP, no
biases). The output head spans the global vocabulary; training and scoring
always go through the field-masked softmax, which restricts each position's
distribution to the vocabulary block of the field being predicted (plus that
field's fallback special, so encodable data is always finitely scorable).

All math is numpy; gradients are exact for the masked mean-NLL loss, which is
what makes finite-difference verification possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..vocab import FIELD_FALLBACK_SPECIAL, FIELD_ORDER, GlobalVocab, PAD_ID, field_of
from .config import ARCH_ABSOLUTE, ModelConfig

LN_EPS = 1e-5
RMS_EPS = 1e-6
ROPE_BASE = 10_000.0
INIT_SCALE = 0.02


class VocabMismatchError(RuntimeError):
    """Model/vocabulary pairing violated (hash mismatch)."""


@dataclass
class ModelState:
    """Configuration plus named parameter tensors; the unit of checkpointing."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab_hash: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.params["wte"].dtype

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype: np.dtype | type) -> "ModelState":
        return ModelState(
            config=self.config,
            params={name: p.astype(dtype) for name, p in self.params.items()},
            vocab_hash=self.vocab_hash,
        )

    def copy(self) -> "ModelState":
        return ModelState(
            config=self.config,
            params={name: p.copy() for name, p in self.params.items()},
            vocab_hash=self.vocab_hash,
        )


def init_model(
    config: ModelConfig,
    seed: int | None = None,
    vocab_hash: int = 0,
    dtype: np.dtype | type = np.float32,
) -> ModelState:
    """Deterministic scaled-normal initialization.

    Residual projections are drawn at scale ``0.02 / sqrt(2 * n_layers)`` so
    the residual stream variance stays flat with depth.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    absolute = config.arch == ARCH_ABSOLUTE
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    residual_scale = INIT_SCALE / math.sqrt(2.0 * config.n_layers)
    params: dict[str, np.ndarray] = {}

    def normal(name: str, shape: tuple[int, ...], scale: float = INIT_SCALE) -> None:
        params[name] = rng.normal(0.0, scale, size=shape)

    def zeros(name: str, shape: tuple[int, ...]) -> None:
        params[name] = np.zeros(shape)

    def ones(name: str, shape: tuple[int, ...]) -> None:
        params[name] = np.ones(shape)

    normal("wte", (v, d))
    if absolute:
        normal("wpe", (config.context_len, d))
    for i in range(config.n_layers):
        if absolute:
            ones(f"h{i}.ln1.g", (d,))
            zeros(f"h{i}.ln1.b", (d,))
        else:
            ones(f"h{i}.rms1.g", (d,))
        normal(f"h{i}.attn.wqkv", (d, 3 * d))
        if absolute:
            zeros(f"h{i}.attn.bqkv", (3 * d,))
        normal(f"h{i}.attn.wo", (d, d), residual_scale)
        if absolute:
            zeros(f"h{i}.attn.bo", (d,))
            ones(f"h{i}.ln2.g", (d,))
            zeros(f"h{i}.ln2.b", (d,))
            normal(f"h{i}.mlp.wfc", (d, f))
            zeros(f"h{i}.mlp.bfc", (f,))
            normal(f"h{i}.mlp.wproj", (f, d), residual_scale)
            zeros(f"h{i}.mlp.bproj", (d,))
        else:
            ones(f"h{i}.rms2.g", (d,))
            normal(f"h{i}.mlp.wgate", (d, f))
            normal(f"h{i}.mlp.wup", (d, f))
            normal(f"h{i}.mlp.wdown", (f, d), residual_scale)
    if absolute:
        ones("lnf.g", (d,))
        zeros("lnf.b", (d,))
    else:
        ones("rmsf.g", (d,))
    normal("head.w", (d, v))
    if absolute:
        zeros("head.b", (v,))

    params = {name: p.astype(dtype) for name, p in params.items()}
    return ModelState(config=config, params=params, vocab_hash=vocab_hash)


def check_vocab(state: ModelState, vocab: GlobalVocab) -> None:
    """Raise unless the model was initialized against this vocabulary.

    A zero hash marks an unbound model (used by low-level tests) and skips
    the check.
    """
    if state.vocab_hash and state.vocab_hash != vocab.hash:
        raise VocabMismatchError(
            f"model built for vocab {state.vocab_hash:016x}, got {vocab.hash:016x}"
        )


# ---------------------------------------------------------------------------
# primitive ops (forward, backward) -----------------------------------------


def _layer_norm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xn = xc * inv
    return g * xn + b, (xn, inv, g)


def _layer_norm_bwd(dy, cache):
    xn, inv, g = cache
    n = xn.shape[-1]
    dg = (dy * xn).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxn = dy * g
    dx = inv * (dxn - dxn.mean(axis=-1, keepdims=True) - xn * (dxn * xn).sum(-1, keepdims=True) / n)
    return dx, dg, db


def _rms_norm_fwd(x, g):
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)
    xn = x * inv
    return g * xn, (xn, inv, g)


def _rms_norm_bwd(dy, cache):
    xn, inv, g = cache
    dg = (dy * xn).sum(axis=tuple(range(dy.ndim - 1)))
    dxn = dy * g
    dx = inv * (dxn - xn * (dxn * xn).mean(axis=-1, keepdims=True))
    return dx, dg


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def _silu_bwd(dy, cache):
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def _rope_tables(n_pos: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    freqs = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(n_pos, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rope_apply(x, cos, sin):
    # x: (B, H, T, dh); tables: (T, dh/2) broadcast over batch and heads.
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def _rope_unapply(dx, cos, sin):
    # The rotation is orthogonal, so the backward pass rotates by -angle.
    d1, d2 = dx[..., 0::2], dx[..., 1::2]
    out = np.empty_like(dx)
    out[..., 0::2] = d1 * cos + d2 * sin
    out[..., 1::2] = -d1 * sin + d2 * cos
    return out


def _softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _attn_fwd(h, wqkv, bqkv, wo, bo, n_heads, mask, rope):
    B, T, d = h.shape
    dh = d // n_heads
    qkv = h.reshape(-1, d) @ wqkv
    if bqkv is not None:
        qkv = qkv + bqkv
    qkv = qkv.reshape(B, T, 3, n_heads, dh)
    q = np.ascontiguousarray(qkv[:, :, 0].transpose(0, 2, 1, 3))
    k = np.ascontiguousarray(qkv[:, :, 1].transpose(0, 2, 1, 3))
    v = np.ascontiguousarray(qkv[:, :, 2].transpose(0, 2, 1, 3))
    if rope is not None:
        cos, sin = rope
        q = _rope_apply(q, cos, sin)
        k = _rope_apply(k, cos, sin)
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores = scores + mask
    att = _softmax_last(scores)
    ctx = att @ v
    merged = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(B, T, d)
    out = merged.reshape(-1, d) @ wo
    if bo is not None:
        out = out + bo
    return out.reshape(B, T, d), (h, q, k, v, att, merged, rope, scale)


def _attn_bwd(dout, cache, wqkv, wo, n_heads, has_bias):
    h, q, k, v, att, merged, rope, scale = cache
    B, T, d = h.shape
    dh = d // n_heads
    dout2 = dout.reshape(-1, d)
    dwo = merged.reshape(-1, d).T @ dout2
    dbo = dout2.sum(axis=0) if has_bias else None
    dmerged = (dout2 @ wo.T).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    datt = dmerged @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ dmerged
    dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
    if rope is not None:
        cos, sin = rope
        dq = _rope_unapply(dq, cos, sin)
        dk = _rope_unapply(dk, cos, sin)
    dqkv = np.empty((B, T, 3, n_heads, dh), dtype=dout.dtype)
    dqkv[:, :, 0] = dq.transpose(0, 2, 1, 3)
    dqkv[:, :, 1] = dk.transpose(0, 2, 1, 3)
    dqkv[:, :, 2] = dv.transpose(0, 2, 1, 3)
    dqkv2 = dqkv.reshape(-1, 3 * d)
    dwqkv = h.reshape(-1, d).T @ dqkv2
    dbqkv = dqkv2.sum(axis=0) if has_bias else None
    dhid = (dqkv2 @ wqkv.T).reshape(B, T, d)
    return dhid, dwqkv, dbqkv, dwo, dbo


# ---------------------------------------------------------------------------
# full network ---------------------------------------------------------------


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ValueError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")


def _forward_cached(state: ModelState, tokens: np.ndarray, need_cache: bool):
    cfg, P = state.config, state.params
    B, T = tokens.shape
    if T > cfg.context_len:
        raise ValueError(f"sequence length {T} exceeds context_len {cfg.context_len}")
    if T == 0:
        raise ValueError("empty token sequence")
    absolute = cfg.arch == ARCH_ABSOLUTE
    dtype = state.dtype

    x = P["wte"][tokens]
    if absolute:
        x = x + P["wpe"][:T]
        rope = None
    else:
        rope = _rope_tables(T, cfg.head_dim, dtype)
    mask = np.triu(np.full((T, T), -np.inf, dtype=dtype), k=1)

    layer_caches = []
    for i in range(cfg.n_layers):
        if absolute:
            normed, c_n1 = _layer_norm_fwd(x, P[f"h{i}.ln1.g"], P[f"h{i}.ln1.b"])
            attn_out, c_attn = _attn_fwd(
                normed, P[f"h{i}.attn.wqkv"], P[f"h{i}.attn.bqkv"],
                P[f"h{i}.attn.wo"], P[f"h{i}.attn.bo"], cfg.n_heads, mask, rope,
            )
        else:
            normed, c_n1 = _rms_norm_fwd(x, P[f"h{i}.rms1.g"])
            attn_out, c_attn = _attn_fwd(
                normed, P[f"h{i}.attn.wqkv"], None,
                P[f"h{i}.attn.wo"], None, cfg.n_heads, mask, rope,
            )
        x = x + attn_out
        if absolute:
            normed2, c_n2 = _layer_norm_fwd(x, P[f"h{i}.ln2.g"], P[f"h{i}.ln2.b"])
            a = normed2.reshape(-1, cfg.d_model) @ P[f"h{i}.mlp.wfc"] + P[f"h{i}.mlp.bfc"]
            act, c_act = _gelu_fwd(a)
            mlp_out = (act @ P[f"h{i}.mlp.wproj"] + P[f"h{i}.mlp.bproj"]).reshape(x.shape)
            c_mlp = (normed2, act, c_act)
        else:
            normed2, c_n2 = _rms_norm_fwd(x, P[f"h{i}.rms2.g"])
            flat = normed2.reshape(-1, cfg.d_model)
            gate_pre = flat @ P[f"h{i}.mlp.wgate"]
            up = flat @ P[f"h{i}.mlp.wup"]
            gate, c_act = _silu_fwd(gate_pre)
            inner = gate * up
            mlp_out = (inner @ P[f"h{i}.mlp.wdown"]).reshape(x.shape)
            c_mlp = (normed2, up, gate, inner, c_act)
        x = x + mlp_out
        if need_cache:
            layer_caches.append((c_n1, c_attn, c_n2, c_mlp))

    if absolute:
        hidden, c_final = _layer_norm_fwd(x, P["lnf.g"], P["lnf.b"])
    else:
        hidden, c_final = _rms_norm_fwd(x, P["rmsf.g"])
    logits = hidden.reshape(-1, cfg.d_model) @ P["head.w"]
    if absolute:
        logits = logits + P["head.b"]
    logits = logits.reshape(B, T, cfg.vocab_size)
    cache = (tokens, layer_caches, c_final, hidden) if need_cache else None
    return logits, hidden, cache


def forward(state: ModelState, tokens, return_hidden: bool = False):
    """Causal logits over the global vocabulary.

    ``tokens`` may be a single sequence or a padded batch; the result keeps
    that shape. Final pre-head hidden states back the contrastive decoder.
    """
    batch, squeeze = _as_batch(tokens)
    logits, hidden, _ = _forward_cached(state, batch, need_cache=False)
    if squeeze:
        logits, hidden = logits[0], hidden[0]
    return (logits, hidden) if return_hidden else logits


def _backward(state: ModelState, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    cfg, P = state.config, state.params
    tokens, layer_caches, c_final, hidden = cache
    B, T = tokens.shape
    d = cfg.d_model
    absolute = cfg.arch == ARCH_ABSOLUTE
    grads: dict[str, np.ndarray] = {}

    dl2 = dlogits.reshape(-1, cfg.vocab_size)
    grads["head.w"] = hidden.reshape(-1, d).T @ dl2
    if absolute:
        grads["head.b"] = dl2.sum(axis=0)
    dhidden = (dl2 @ P["head.w"].T).reshape(B, T, d)
    if absolute:
        dx, grads["lnf.g"], grads["lnf.b"] = _layer_norm_bwd(dhidden, c_final)
    else:
        dx, grads["rmsf.g"] = _rms_norm_bwd(dhidden, c_final)

    for i in reversed(range(cfg.n_layers)):
        c_n1, c_attn, c_n2, c_mlp = layer_caches[i]
        # MLP backward
        if absolute:
            normed2, act, c_act = c_mlp
            dmlp2 = dx.reshape(-1, d)
            grads[f"h{i}.mlp.wproj"] = act.T @ dmlp2
            grads[f"h{i}.mlp.bproj"] = dmlp2.sum(axis=0)
            dact = dmlp2 @ P[f"h{i}.mlp.wproj"].T
            da = _gelu_bwd(dact, c_act)
            grads[f"h{i}.mlp.wfc"] = normed2.reshape(-1, d).T @ da
            grads[f"h{i}.mlp.bfc"] = da.sum(axis=0)
            dnormed2 = (da @ P[f"h{i}.mlp.wfc"].T).reshape(B, T, d)
            dres, grads[f"h{i}.ln2.g"], grads[f"h{i}.ln2.b"] = _layer_norm_bwd(dnormed2, c_n2)
        else:
            normed2, up, gate, inner, c_act = c_mlp
            dmlp2 = dx.reshape(-1, d)
            grads[f"h{i}.mlp.wdown"] = inner.T @ dmlp2
            dinner = dmlp2 @ P[f"h{i}.mlp.wdown"].T
            dup = dinner * gate
            dgate_pre = _silu_bwd(dinner * up, c_act)
            flat2 = normed2.reshape(-1, d)
            grads[f"h{i}.mlp.wgate"] = flat2.T @ dgate_pre
            grads[f"h{i}.mlp.wup"] = flat2.T @ dup
            dnormed2 = (dgate_pre @ P[f"h{i}.mlp.wgate"].T + dup @ P[f"h{i}.mlp.wup"].T).reshape(B, T, d)
            dres, grads[f"h{i}.rms2.g"] = _rms_norm_bwd(dnormed2, c_n2)
        dx = dx + dres

        # Attention backward
        dattn_out = dx
        dnormed, dwqkv, dbqkv, dwo, dbo = _attn_bwd(
            dattn_out, c_attn, P[f"h{i}.attn.wqkv"], P[f"h{i}.attn.wo"],
            cfg.n_heads, has_bias=absolute,
        )
        grads[f"h{i}.attn.wqkv"] = dwqkv
        grads[f"h{i}.attn.wo"] = dwo
        if absolute:
            grads[f"h{i}.attn.bqkv"] = dbqkv
            grads[f"h{i}.attn.bo"] = dbo
            dres, grads[f"h{i}.ln1.g"], grads[f"h{i}.ln1.b"] = _layer_norm_bwd(dnormed, c_n1)
        else:
            dres, grads[f"h{i}.rms1.g"] = _rms_norm_bwd(dnormed, c_n1)
        dx = dx + dres

    if absolute:
        grads["wpe"] = np.zeros_like(P["wpe"])
        grads["wpe"][:T] = dx.sum(axis=0)
    dwte = np.zeros_like(P["wte"])
    np.add.at(dwte, tokens.reshape(-1), dx.reshape(-1, d))
    grads["wte"] = dwte
    return grads


# ---------------------------------------------------------------------------
# field-masked loss ----------------------------------------------------------


@dataclass
class LossBreakdown:
    """Masked mean NLL with its per-field components (all in nats)."""

    loss: float
    field_loss: dict[str, float]
    field_sum: dict[str, float]
    field_count: dict[str, int]

    @property
    def total_count(self) -> int:
        return sum(self.field_count.values())


def _field_supports(vocab: GlobalVocab) -> list[tuple[np.ndarray, int, int, int | None]]:
    """Per field: (support ids, block offset, block size, fallback special id)."""
    out = []
    for name in FIELD_ORDER:
        fv = vocab.field(name)
        special = FIELD_FALLBACK_SPECIAL[name]
        ids = np.asarray(vocab.prediction_support(name), dtype=np.int64)
        out.append((ids, fv.offset, fv.size, special))
    return out


def _masked_nll(
    logits: np.ndarray,
    tokens: np.ndarray,
    targets: np.ndarray,
    vocab: GlobalVocab,
    want_grad: bool,
    want_map: bool,
):
    B, T, V = logits.shape
    predicted = tokens != PAD_ID
    predicted[:, 0] = False
    if not predicted.any():
        raise ValueError("batch contains no predicted positions")
    n_total = int(predicted.sum())

    dlogits = np.zeros_like(logits) if want_grad else None
    nll_map = np.full((B, T), np.nan) if want_map else None
    field_sum: dict[str, float] = {}
    field_count: dict[str, int] = {}

    pos_field = np.full(T, -1, dtype=np.int64)
    if T > 1:
        pos_field[1:] = (np.arange(1, T) - 1) % 3

    supports = _field_supports(vocab)
    for fidx, name in enumerate(FIELD_ORDER):
        sel = predicted & (pos_field == fidx)[None, :]
        b_idx, p_idx = np.nonzero(sel)
        if b_idx.size == 0:
            field_sum[name] = 0.0
            field_count[name] = 0
            continue
        sup, offset, size, special = supports[fidx]
        rows = logits[b_idx, p_idx - 1]
        z = rows[:, sup]
        tgt = targets[b_idx, p_idx]
        in_block = (tgt >= offset) & (tgt < offset + size)
        if special is None:
            if not in_block.all():
                bad = int(p_idx[~in_block][0])
                raise ValueError(f"target at position {bad} outside {name} block")
            local = tgt - offset
        else:
            is_special = tgt == special
            if not (in_block | is_special).all():
                bad = int(p_idx[~(in_block | is_special)][0])
                raise ValueError(f"target at position {bad} outside {name} support")
            local = np.where(is_special, size, tgt - offset)
        m = z.max(axis=1, keepdims=True)
        ez = np.exp(z - m)
        se = ez.sum(axis=1, keepdims=True)
        lse = (m + np.log(se))[:, 0]
        picked = z[np.arange(z.shape[0]), local]
        nll = (lse - picked).astype(np.float64)
        field_sum[name] = float(nll.sum())
        field_count[name] = int(nll.size)
        if want_map:
            nll_map[b_idx, p_idx] = nll
        if want_grad:
            probs = ez / se
            probs[np.arange(probs.shape[0]), local] -= 1.0
            probs /= n_total
            dlogits[b_idx[:, None], (p_idx - 1)[:, None], sup[None, :]] = probs

    total = sum(field_sum.values())
    breakdown = LossBreakdown(
        loss=total / n_total,
        field_loss={
            name: (field_sum[name] / field_count[name]) if field_count[name] else float("nan")
            for name in FIELD_ORDER
        },
        field_sum=field_sum,
        field_count=field_count,
    )
    return breakdown, dlogits, nll_map


def loss_and_grads(
    state: ModelState,
    vocab: GlobalVocab,
    tokens,
    targets=None,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Masked mean NLL over non-PAD predicted positions, with exact gradients.

    ``targets`` defaults to the input tokens (ordinary next-token training);
    passing an override scores the same positions against other labels, which
    is what the Hessian estimator needs.
    """
    check_vocab(state, vocab)
    batch, _ = _as_batch(tokens)
    tgt = batch if targets is None else np.asarray(targets, dtype=np.int64)
    if tgt.shape != batch.shape:
        raise ValueError("targets must match the token batch shape")
    logits, _, cache = _forward_cached(state, batch, need_cache=True)
    breakdown, dlogits, _ = _masked_nll(logits, batch, tgt, vocab, want_grad=True, want_map=False)
    grads = _backward(state, cache, dlogits)
    return breakdown, grads


def evaluate_loss(state: ModelState, vocab: GlobalVocab, tokens) -> LossBreakdown:
    """Loss breakdown without gradients."""
    check_vocab(state, vocab)
    batch, _ = _as_batch(tokens)
    logits, _, _ = _forward_cached(state, batch, need_cache=False)
    breakdown, _, _ = _masked_nll(logits, batch, batch, vocab, want_grad=False, want_map=False)
    return breakdown


def token_nlls(state: ModelState, vocab: GlobalVocab, tokens) -> np.ndarray:
    """Per-position NLL map (nan at BOS and padding), same shape as ``tokens``."""
    check_vocab(state, vocab)
    batch, squeeze = _as_batch(tokens)
    logits, _, _ = _forward_cached(state, batch, need_cache=False)
    _, _, nll_map = _masked_nll(logits, batch, batch, vocab, want_grad=False, want_map=True)
    return nll_map[0] if squeeze else nll_map


def next_field_distribution(state: ModelState, vocab: GlobalVocab, context) -> np.ndarray:
    """Probability vector (length vocab_size) for the next position's field.

    Mass outside the field's prediction support is exactly zero.
    """
    check_vocab(state, vocab)
    ctx = np.asarray(context, dtype=np.int64)
    if ctx.ndim != 1 or ctx.size == 0:
        raise ValueError("context must be a nonempty 1-D token sequence")
    field = field_of(ctx.size)
    sup = np.asarray(vocab.prediction_support(field), dtype=np.int64)
    logits = forward(state, ctx)
    z = logits[-1, sup]
    probs = np.zeros(state.config.vocab_size, dtype=np.float64)
    probs[sup] = _softmax_last(z.astype(np.float64))
    return probs


def per_row_entropy(state: ModelState, vocab: GlobalVocab, ids) -> list[float | None]:
    """Mean of the three field NLLs per row, given all preceding context.

    Row 0 of a session has no context and is unscored (None). Sessions longer
    than the context window are scored with a trailing window of the most
    recent complete rows.
    """
    check_vocab(state, vocab)
    seq = np.asarray(ids, dtype=np.int64)
    if seq.ndim != 1 or seq.size == 0 or (seq.size - 1) % 3 != 0:
        raise ValueError("ids must be a [BOS, 3*R] session layout")
    n_rows = (seq.size - 1) // 3
    if n_rows == 0:
        return []
    window_rows = state.config.max_rows
    result: list[float | None] = [None] * n_rows

    head_rows = min(n_rows, window_rows)
    head = seq[: 1 + 3 * head_rows]
    nll = token_nlls(state, vocab, head)
    for r in range(1, head_rows):
        result[r] = float(np.mean(nll[1 + 3 * r : 4 + 3 * r]))

    if n_rows > window_rows:
        # Batched sliding windows, one per remaining row, BOS re-prepended.
        length = 1 + 3 * window_rows
        pending = list(range(window_rows, n_rows))
        for start in range(0, len(pending), 64):
            rows = pending[start : start + 64]
            windows = np.empty((len(rows), length), dtype=np.int64)
            for j, r in enumerate(rows):
                windows[j, 0] = seq[0]
                lo = 1 + 3 * (r - window_rows + 1)
                windows[j, 1:] = seq[lo : lo + 3 * window_rows]
            maps = token_nlls(state, vocab, windows)
            for j, r in enumerate(rows):
                result[r] = float(np.mean(maps[j, -3:]))
    return result


def pad_batch(sequences: list, pad_id: int = PAD_ID) -> np.ndarray:
    """Right-pad variable-length id sequences into one int64 batch."""
    if not sequences:
        raise ValueError("cannot batch zero sequences")
    longest = max(len(s) for s in sequences)
    batch = np.full((len(sequences), longest), pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        batch[i, : len(s)] = s
    return batch
