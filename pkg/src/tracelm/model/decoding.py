"""Row-level decoding strategies over the field-masked head.

A row is decoded as three successive field-constrained selections (action,
patient, delta bin). Contrastive search re-ranks the top-k candidates by
``(1 - alpha) * p(v | ctx) - alpha * max_j cos(h_v, h_j)`` where ``h_v`` is
the candidate's final hidden state and ``h_j`` ranges over the hidden states
of all prior positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..vocab import GlobalVocab, field_of
from .transformer import ModelState, _softmax_last, check_vocab, forward

STRATEGY_KINDS = ("greedy", "topk", "contrastive")


@dataclass(frozen=True)
class DecodeStrategy:
    kind: str = "greedy"
    k: int = 5
    temperature: float = 1.0
    alpha: float = 0.6

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown decoding strategy {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


GREEDY = DecodeStrategy(kind="greedy")


def _select_token(
    state: ModelState,
    vocab: GlobalVocab,
    context: np.ndarray,
    strategy: DecodeStrategy,
    rng: np.random.Generator | None,
) -> int:
    sup = np.asarray(vocab.prediction_support(field_of(context.size)), dtype=np.int64)
    logits, hidden = forward(state, context, return_hidden=True)
    z = logits[-1, sup].astype(np.float64)

    if strategy.kind == "greedy":
        return int(sup[np.argmax(z)])

    if strategy.kind == "topk":
        if rng is None:
            raise ValueError("top-k sampling requires a seeded rng")
        k = min(strategy.k, sup.size)
        top = np.argsort(-z, kind="stable")[:k]
        probs = _softmax_last(z[top] / strategy.temperature)
        return int(sup[top[rng.choice(k, p=probs)]])

    # Contrastive search: probability term against a degeneration penalty.
    probs = _softmax_last(z)
    k = min(strategy.k, sup.size)
    order = np.argsort(-probs, kind="stable")[:k]
    candidates = sup[order]
    batch = np.concatenate(
        [np.tile(context, (k, 1)), candidates[:, None]], axis=1
    )
    _, cand_hidden = forward(state, batch, return_hidden=True)
    h_new = cand_hidden[:, -1, :]  # (k, d)
    norms_ctx = np.linalg.norm(hidden, axis=-1)
    norms_new = np.linalg.norm(h_new, axis=-1)
    cos = (h_new @ hidden.T) / (norms_new[:, None] * norms_ctx[None, :] + 1e-12)
    penalty = cos.max(axis=1)
    score = (1.0 - strategy.alpha) * probs[order] - strategy.alpha * penalty
    return int(candidates[np.argmax(score)])


def decode_row(
    state: ModelState,
    vocab: GlobalVocab,
    context,
    strategy: DecodeStrategy = GREEDY,
    rng: np.random.Generator | None = None,
) -> tuple[int, int, int]:
    """Decode one (MN, PID, AT) token triple after a row-aligned context."""
    check_vocab(state, vocab)
    ctx = np.asarray(context, dtype=np.int64)
    if ctx.ndim != 1 or ctx.size == 0 or (ctx.size - 1) % 3 != 0:
        raise ValueError("context must be [BOS, 3*R] (end on a row boundary)")
    picked: list[int] = []
    for _ in range(3):
        token = _select_token(state, vocab, ctx, strategy, rng)
        picked.append(token)
        ctx = np.append(ctx, token)
    return picked[0], picked[1], picked[2]


def generate_rows(
    state: ModelState,
    vocab: GlobalVocab,
    context,
    n_rows: int,
    strategy: DecodeStrategy = GREEDY,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, int, int]]:
    """Free-running generation of ``n_rows`` rows, appending as it goes.

    Generation stops early if the context window fills up.
    """
    ctx = np.asarray(context, dtype=np.int64)
    rows: list[tuple[int, int, int]] = []
    for _ in range(n_rows):
        if ctx.size + 3 > state.config.context_len:
            break
        row = decode_row(state, vocab, ctx, strategy, rng)
        rows.append(row)
        ctx = np.append(ctx, row)
    return rows
