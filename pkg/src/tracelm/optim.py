"""Parameter update rules: Sophia (clipped diagonal-Hessian) and AdamW.

Both operate in place on a ``{name: tensor}`` parameter dict and share the
shape-mirrored :class:`OptimState`. Sophia's curvature signal comes from the
Gauss-Newton-Bartlett estimator: labels are sampled from the model's own
field-masked distribution, the gradient against those labels is squared and
scaled by the batch size, then EMA-merged into the running estimate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model.transformer import ModelState, _as_batch, _forward_cached, loss_and_grads
from .vocab import FIELD_ORDER, GlobalVocab, PAD_ID

ADAMW_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0}
SOPHIA_DEFAULTS = {
    "beta1": 0.965,
    "beta2": 0.99,
    "eps": 1e-12,
    "weight_decay": 0.1,
    "rho": 0.04,
    "hessian_interval": 10,
}


class StaleHessianWarning(UserWarning):
    """Sophia stepped with a Hessian estimate older than twice its refresh interval."""


@dataclass
class OptimState:
    """Moments and curvature mirrors for one parameter set."""

    kind: str
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    rho: float
    hessian_interval: int
    step: int = 0
    last_hessian_step: int = -1
    m: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)  # v (adamw) or h (sophia)


def init_optim(kind: str, params: dict[str, np.ndarray], lr: float = 3e-4, **overrides) -> OptimState:
    if kind == "adamw":
        hp = dict(ADAMW_DEFAULTS, rho=0.0, hessian_interval=0)
    elif kind == "sophia":
        hp = dict(SOPHIA_DEFAULTS)
    else:
        raise ValueError(f"unknown optimizer {kind!r}")
    unknown = set(overrides) - set(hp)
    if unknown:
        raise ValueError(f"unknown hyperparameters for {kind}: {sorted(unknown)}")
    hp.update(overrides)
    return OptimState(
        kind=kind,
        lr=lr,
        beta1=hp["beta1"],
        beta2=hp["beta2"],
        eps=hp["eps"],
        weight_decay=hp["weight_decay"],
        rho=hp["rho"],
        hessian_interval=hp["hessian_interval"],
        m={name: np.zeros_like(p) for name, p in params.items()},
        second={name: np.zeros_like(p) for name, p in params.items()},
    )


def _check_shapes(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    for name, p in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name}")
        if grads[name].shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {name}")


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """Decoupled weight decay with bias-corrected moments, in place."""
    if state.kind != "adamw":
        raise ValueError("optimizer state was not initialized for adamw")
    _check_shapes(params, grads, state)
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name in sorted(params):
        p, g = params[name], grads[name]
        m = state.m[name]
        v = state.second[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= state.lr * update + state.lr * state.weight_decay * p


def sophia_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """Momentum over a clipped curvature-preconditioned direction, in place.

    The per-coordinate move is bounded: |delta| <= lr * (1 + wd * |theta|),
    asserted on every step.
    """
    if state.kind != "sophia":
        raise ValueError("optimizer state was not initialized for sophia")
    _check_shapes(params, grads, state)
    state.step += 1
    if (
        state.last_hessian_step >= 0
        and state.step - state.last_hessian_step > 2 * state.hessian_interval
    ):
        warnings.warn(
            f"Hessian estimate is {state.step - state.last_hessian_step} steps old "
            f"(interval {state.hessian_interval})",
            StaleHessianWarning,
            stacklevel=2,
        )
    for name in sorted(params):
        p, g = params[name], grads[name]
        m = state.m[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        denom = np.maximum(state.rho * state.second[name], state.eps)
        delta = -state.lr * np.clip(m / denom, -1.0, 1.0) - state.lr * state.weight_decay * p
        # The exact bound |delta| <= lr * (1 + wd * |theta|) can be met with
        # equality when the clip saturates; allow single-precision rounding.
        bound = state.lr * (1.0 + state.weight_decay * np.abs(p)) * (1.0 + 1e-6) + 1e-12
        if np.any(np.abs(delta) > bound):
            raise AssertionError(f"sophia update bound violated for {name}")
        p += delta


def sample_field_targets(
    state: ModelState,
    vocab: GlobalVocab,
    tokens: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw labels from the model's own field-masked distributions.

    Unpredicted positions keep their original tokens (they are masked out of
    the loss anyway).
    """
    batch, _ = _as_batch(tokens)
    logits, _, _ = _forward_cached(state, batch, need_cache=False)
    sampled = batch.copy()
    _, T = batch.shape
    predicted = batch != PAD_ID
    predicted[:, 0] = False
    pos_field = np.full(T, -1, dtype=np.int64)
    if T > 1:
        pos_field[1:] = (np.arange(1, T) - 1) % 3
    for fidx, name in enumerate(FIELD_ORDER):
        sel = predicted & (pos_field == fidx)[None, :]
        b_idx, p_idx = np.nonzero(sel)
        if b_idx.size == 0:
            continue
        sup = np.asarray(vocab.prediction_support(name), dtype=np.int64)
        z = logits[b_idx, p_idx - 1][:, sup].astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        cum = probs.cumsum(axis=1)
        u = rng.random(b_idx.size)
        local = np.minimum((u[:, None] > cum).sum(axis=1), sup.size - 1)
        sampled[b_idx, p_idx] = sup[local]
    return sampled


def estimate_hessian_diag(
    model_state: ModelState,
    vocab: GlobalVocab,
    tokens: np.ndarray,
    rng: np.random.Generator,
    opt_state: OptimState | None = None,
) -> dict[str, np.ndarray]:
    """Gauss-Newton-Bartlett diagonal estimate: B * g_hat^2 on sampled labels.

    When an optimizer state is given, the estimate is EMA-merged into it and
    the refresh step is recorded.
    """
    batch, _ = _as_batch(tokens)
    sampled = sample_field_targets(model_state, vocab, batch, rng)
    _, grads = loss_and_grads(model_state, vocab, batch, targets=sampled)
    scale = float(batch.shape[0])
    h_hat = {name: scale * g * g for name, g in grads.items()}
    if opt_state is not None:
        if opt_state.kind != "sophia":
            raise ValueError("Hessian estimates only feed a sophia state")
        for name in sorted(h_hat):
            h = opt_state.second[name]
            h *= opt_state.beta2
            h += (1.0 - opt_state.beta2) * h_hat[name]
        opt_state.last_hessian_step = opt_state.step
    return h_hat


def lr_schedule(
    step: int,
    total_steps: int,
    base_lr: float,
    warmup_steps: int = 100,
    min_frac: float = 0.1,
) -> float:
    """Linear warmup followed by cosine decay to ``min_frac * base_lr``.

    ``step`` is 1-based (the step about to be taken).
    """
    if step < 1:
        raise ValueError("step is 1-based")
    warmup = min(warmup_steps, total_steps)
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if total_steps <= warmup:
        return base_lr
    floor = base_lr * min_frac
    progress = (step - warmup) / (total_steps - warmup)
    progress = min(max(progress, 0.0), 1.0)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))
