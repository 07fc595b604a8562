"""Synthetic audit-log corpora from first-order Markov workflow processes.

The generator plans shifts and sessions explicitly, so the configured
structure (session counts, patient pools, delta bins) doubles as a ground
truth against which the preprocessing pipeline and trained models can be
checked. The action process is a Markov chain with an analytic entropy rate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ingest import ClinicianStream, RawAuditEvent, audit_csv_text

# One representative raw delta (seconds) per quantizer bin; each re-quantizes
# to its own bin under the default 0-240 s logarithmic spec.
BIN_REPRESENTATIVE_SECONDS = (1, 3, 10, 30, 120)

DEFAULT_EPOCH_START = 1_546_300_800  # 2019-01-01T00:00:00Z


class ProcessSpecError(ValueError):
    """Raised for inconsistent process specifications."""


@dataclass(frozen=True)
class ProcessSpec:
    """Parametric workflow process driving the synthetic generator."""

    actions: tuple[str, ...]
    transitions: np.ndarray  # (A, A) row-stochastic
    initial: np.ndarray  # (A,)
    delta_bins: np.ndarray  # (A, A, 5) per-transition bin distribution
    patient_pool: int = 4
    patient_switch_prob: float = 0.0
    rows_per_session: tuple[int, int] = (20, 40)
    sessions_per_shift: tuple[int, int] = (2, 4)
    inter_session_gap_s: int = 600
    inter_shift_gap_s: int = 36_000
    seed: int = 0

    def __post_init__(self) -> None:
        n = len(self.actions)
        transitions = np.asarray(self.transitions, dtype=np.float64)
        initial = np.asarray(self.initial, dtype=np.float64)
        deltas = np.broadcast_to(
            np.asarray(self.delta_bins, dtype=np.float64), (n, n, 5)
        ).copy()
        object.__setattr__(self, "transitions", transitions)
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "delta_bins", deltas)
        if transitions.shape != (n, n):
            raise ProcessSpecError(f"transition matrix must be {n}x{n}")
        if initial.shape != (n,):
            raise ProcessSpecError(f"initial distribution must have length {n}")
        for name, rows in (("transition", transitions), ("initial", initial[None, :])):
            if np.any(rows < 0):
                raise ProcessSpecError(f"{name} probabilities must be >= 0")
            if np.any(np.abs(rows.sum(axis=-1) - 1.0) > 1e-9):
                raise ProcessSpecError(f"{name} rows must sum to 1 within 1e-9")
        if np.any(self.delta_bins < 0):
            raise ProcessSpecError("delta bin probabilities must be >= 0")
        # Only reachable transitions need a delta distribution.
        reachable = transitions > 0.0
        sums = self.delta_bins.sum(axis=-1)
        if np.any(np.abs(sums[reachable] - 1.0) > 1e-9):
            raise ProcessSpecError("delta bins of reachable transitions must be distributions")
        if not 0 <= self.patient_pool <= 128:
            raise ProcessSpecError("patient pool must be in 0..128")
        if not 0.0 <= self.patient_switch_prob <= 1.0:
            raise ProcessSpecError("patient switch probability must be in [0, 1]")
        lo, hi = self.rows_per_session
        if not 1 <= lo <= hi:
            raise ProcessSpecError("rows_per_session must satisfy 1 <= lo <= hi")
        lo, hi = self.sessions_per_shift
        if not 1 <= lo <= hi:
            raise ProcessSpecError("sessions_per_shift must satisfy 1 <= lo <= hi")
        if not 300 < self.inter_session_gap_s < 21_600:
            raise ProcessSpecError("inter-session gap must fall strictly between 300 and 21600 s")
        if self.inter_shift_gap_s < 21_600:
            raise ProcessSpecError("inter-shift gap must be >= 21600 s")

    def to_json(self) -> str:
        payload = {
            "actions": list(self.actions),
            "transitions": self.transitions.tolist(),
            "initial": self.initial.tolist(),
            "delta_bins": self.delta_bins.tolist(),
            "patient_pool": self.patient_pool,
            "patient_switch_prob": self.patient_switch_prob,
            "rows_per_session": list(self.rows_per_session),
            "sessions_per_shift": list(self.sessions_per_shift),
            "inter_session_gap_s": self.inter_session_gap_s,
            "inter_shift_gap_s": self.inter_shift_gap_s,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ProcessSpec":
        payload = json.loads(text)
        try:
            return cls(
                actions=tuple(payload["actions"]),
                transitions=np.asarray(payload["transitions"], dtype=np.float64),
                initial=np.asarray(payload["initial"], dtype=np.float64),
                delta_bins=np.asarray(payload["delta_bins"], dtype=np.float64),
                patient_pool=int(payload.get("patient_pool", 4)),
                patient_switch_prob=float(payload.get("patient_switch_prob", 0.0)),
                rows_per_session=tuple(payload.get("rows_per_session", (20, 40))),
                sessions_per_shift=tuple(payload.get("sessions_per_shift", (2, 4))),
                inter_session_gap_s=int(payload.get("inter_session_gap_s", 600)),
                inter_shift_gap_s=int(payload.get("inter_shift_gap_s", 36_000)),
                seed=int(payload.get("seed", 0)),
            )
        except KeyError as exc:
            raise ProcessSpecError(f"process spec missing field {exc}") from exc


@dataclass(frozen=True)
class ClinicianPlan:
    """Events for one clinician plus the session structure that produced them."""

    user_id: str
    events: tuple[RawAuditEvent, ...]
    session_rows: tuple[tuple[int, ...], ...] = field(repr=False)  # per shift

    @property
    def n_sessions(self) -> int:
        return sum(len(shift) for shift in self.session_rows)


def _clinician_rng(seed: int, clinician: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(clinician,)))


def generate_plan(
    spec: ProcessSpec,
    n_clinicians: int,
    n_events_per_clinician: int,
    seed: int | None = None,
) -> list[ClinicianPlan]:
    """Plan full shifts/sessions per clinician until the event target is met.

    Whole sessions are always emitted, so clinicians may slightly overshoot
    ``n_events_per_clinician``.
    """
    root = spec.seed if seed is None else seed
    n_actions = len(spec.actions)
    # Cumulative rows for inverse-CDF sampling; much faster than per-event choice().
    cum_initial = np.cumsum(spec.initial)
    cum_transitions = np.cumsum(spec.transitions, axis=1)
    cum_deltas = np.cumsum(spec.delta_bins, axis=2)
    plans: list[ClinicianPlan] = []
    for clinician in range(n_clinicians):
        rng = _clinician_rng(root, clinician)
        user_id = f"clin{clinician:04d}"
        events: list[RawAuditEvent] = []
        shifts: list[tuple[int, ...]] = []
        now = DEFAULT_EPOCH_START
        instant = 0
        while len(events) < n_events_per_clinician:
            shift_index = len(shifts)
            pool = [f"{user_id}-s{shift_index}-p{k}" for k in range(spec.patient_pool)]
            session_sizes: list[int] = []
            n_sessions = int(rng.integers(spec.sessions_per_shift[0], spec.sessions_per_shift[1] + 1))
            if shifts:
                now += spec.inter_shift_gap_s
            for session_index in range(n_sessions):
                if session_index > 0:
                    now += spec.inter_session_gap_s
                n_rows = int(rng.integers(spec.rows_per_session[0], spec.rows_per_session[1] + 1))
                session_sizes.append(n_rows)
                draws = rng.random(3 * n_rows)
                state = int(np.searchsorted(cum_initial, draws[0]))
                patient = pool[int(rng.integers(len(pool)))] if pool else None
                for row in range(n_rows):
                    if row > 0:
                        base = 3 * row
                        nxt = int(np.searchsorted(cum_transitions[state], draws[base]))
                        bin_index = int(np.searchsorted(cum_deltas[state, nxt], draws[base + 1]))
                        now += BIN_REPRESENTATIVE_SECONDS[bin_index]
                        state = nxt
                        if pool and spec.patient_switch_prob > 0.0:
                            if draws[base + 2] < spec.patient_switch_prob:
                                patient = pool[int(rng.integers(len(pool)))]
                    events.append(
                        RawAuditEvent(
                            user_id=user_id,
                            metric_name=spec.actions[state],
                            pat_id=patient,
                            access_time=now,
                            access_instant=instant,
                        )
                    )
                    instant += 1
            shifts.append(tuple(session_sizes))
        plans.append(
            ClinicianPlan(user_id=user_id, events=tuple(events), session_rows=tuple(shifts))
        )
    return plans


def generate_logs(
    spec: ProcessSpec,
    n_clinicians: int,
    n_events_per_clinician: int,
    seed: int | None = None,
) -> str:
    """Emit an ingest-compatible CSV corpus; byte-identical for a fixed seed."""
    plans = generate_plan(spec, n_clinicians, n_events_per_clinician, seed)
    streams = [ClinicianStream(user_id=p.user_id, events=p.events) for p in plans]
    return audit_csv_text(streams)


def _assert_square_stochastic(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ProcessSpecError("transition matrix must be square")
    if np.any(matrix < 0) or np.any(np.abs(matrix.sum(axis=1) - 1.0) > 1e-9):
        raise ProcessSpecError("transition matrix rows must be distributions")
    return matrix


def is_irreducible(matrix: np.ndarray) -> bool:
    """Strong connectivity of the support graph of a stochastic matrix."""
    matrix = _assert_square_stochastic(matrix)
    support = matrix > 0.0

    def reaches_all(adjacency: np.ndarray) -> bool:
        n = adjacency.shape[0]
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            node = stack.pop()
            for nxt in np.flatnonzero(adjacency[node]):
                if not seen[nxt]:
                    seen[nxt] = True
                    stack.append(int(nxt))
        return bool(seen.all())

    return reaches_all(support) and reaches_all(support.T)


def stationary_distribution(
    matrix: np.ndarray, tol: float = 1e-12, max_iter: int = 200_000
) -> np.ndarray:
    """Stationary distribution by power iteration to L1 tolerance ``tol``."""
    matrix = _assert_square_stochastic(matrix)
    if not is_irreducible(matrix):
        raise ProcessSpecError("transition matrix is reducible; no unique stationary distribution")
    n = matrix.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ matrix
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    raise ProcessSpecError(f"power iteration did not converge within {max_iter} steps")


def _row_entropies(matrix: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(matrix > 0.0, -matrix * np.log(matrix), 0.0)
    return terms.sum(axis=-1)


def true_entropy_rate(spec_or_matrix: ProcessSpec | np.ndarray, mode: str = "stationary") -> float:
    """Entropy rate of the action process in nats per action.

    ``stationary`` weights the per-state conditional entropies by the
    stationary distribution; ``initial`` uses the spec's initial distribution
    instead (useful for reducible chains).
    """
    if isinstance(spec_or_matrix, ProcessSpec):
        matrix = spec_or_matrix.transitions
        initial = spec_or_matrix.initial
    else:
        matrix = _assert_square_stochastic(spec_or_matrix)
        initial = np.full(matrix.shape[0], 1.0 / matrix.shape[0])
    if mode == "stationary":
        weights = stationary_distribution(matrix)
    elif mode == "initial":
        weights = np.asarray(initial, dtype=np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(weights @ _row_entropies(matrix))


def delta_entropy_rate(spec: ProcessSpec) -> float:
    """Entropy rate of the quantized time-delta process in nats per transition."""
    pi = stationary_distribution(spec.transitions)
    joint = pi[:, None] * spec.transitions  # stationary transition frequencies
    return float((joint * _row_entropies(spec.delta_bins)).sum())


def uniform_delta_bins(n_actions: int, weights: Sequence[float] | None = None) -> np.ndarray:
    """Convenience (A, A, 5) delta distribution shared by every transition."""
    base = np.full(5, 0.2) if weights is None else np.asarray(weights, dtype=np.float64)
    if base.shape != (5,) or abs(base.sum() - 1.0) > 1e-9 or np.any(base < 0):
        raise ProcessSpecError("delta weights must be a 5-bin distribution")
    return np.broadcast_to(base, (n_actions, n_actions, 5)).copy()
