"""Shift and session segmentation with time-delta quantization.

Pipeline order: ``split_shifts`` -> ``remap_patients`` -> ``split_sessions``
-> ``chunk_session``. A shift is a block of one clinician's events with no
inactivity gap of 6 hours or more; a session is a sub-block whose raw gaps
never exceed 5 minutes. Time-deltas are quantized into 5 logarithmic bins
spanning 0-240 seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable

from .ingest import ClinicianStream

SHIFT_GAP_SECONDS = 21_600
SESSION_GAP_SECONDS = 300
PATIENT_CAP = 128

NO_PATIENT_INDEX = -1
# Distinct patients beyond the per-shift cap collapse onto this sentinel; it
# must not collide with -1 or any in-cap index, so it sits below -1.
OOV_PATIENT_INDEX = -2

QUANTIZER_MAX_SECONDS = 240.0
QUANTIZER_BINS = 5


@dataclass(frozen=True)
class QuantizerSpec:
    """Bin upper edges e_k = max^(k/(n-1)) seconds, k = 0..n-1."""

    edges: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.edges) != QUANTIZER_BINS:
            raise ValueError(f"expected {QUANTIZER_BINS} bin edges, got {len(self.edges)}")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bin edges must be strictly increasing")

    @classmethod
    def default(cls) -> "QuantizerSpec":
        top = QUANTIZER_MAX_SECONDS
        n = QUANTIZER_BINS
        return cls(edges=tuple(top ** (k / (n - 1)) for k in range(n)))

    @property
    def labels(self) -> tuple[str, ...]:
        """Display labels: the upper edges, with the closed ends kept terse."""
        out = [f"≤ {self.edges[0]:g}"]
        out.extend(f"{edge:.3f}" for edge in self.edges[1:-1])
        out.append(f"{self.edges[-1]:g}")
        return tuple(out)

    def label(self, bin_index: int) -> str:
        return self.labels[bin_index]


DEFAULT_QUANTIZER = QuantizerSpec.default()


def quantize_delta(delta_s: float, spec: QuantizerSpec = DEFAULT_QUANTIZER) -> int:
    """Map a nonnegative delta in seconds to its bin: smallest k with delta <= e_k.

    Deltas above the top edge clamp into the last bin.
    """
    if delta_s < 0 or math.isnan(delta_s):
        raise ValueError(f"delta must be >= 0, got {delta_s}")
    for k, edge in enumerate(spec.edges):
        if delta_s <= edge:
            return k
    return len(spec.edges) - 1


@dataclass(frozen=True)
class ShiftRow:
    metric_name: str
    pat_id: str | None
    patient_index: int
    delta_seconds: float


@dataclass(frozen=True)
class Shift:
    user_id: str
    index: int
    rows: tuple[ShiftRow, ...]
    patient_map: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class SessionKey:
    user_id: str
    shift_index: int
    session_index: int
    chunk_index: int = 0

    def __str__(self) -> str:
        return f"{self.user_id}/{self.shift_index}/{self.session_index}/{self.chunk_index}"


@dataclass(frozen=True)
class SessionRow:
    metric_name: str
    patient_index: int
    delta_bin: int


@dataclass(frozen=True)
class Session:
    rows: tuple[SessionRow, ...]
    provenance: SessionKey


def split_shifts(stream: ClinicianStream, gap_s: int = SHIFT_GAP_SECONDS) -> list[Shift]:
    """Cut a sorted stream into shifts wherever the raw gap reaches ``gap_s``.

    The first row of every shift has delta 0; patient indices are left
    unassigned (raw ids are carried for ``remap_patients``).
    """
    shifts: list[Shift] = []
    rows: list[ShiftRow] = []
    prev_time: int | None = None
    for event in stream.events:
        gap = 0 if prev_time is None else event.access_time - prev_time
        if prev_time is not None and gap >= gap_s:
            shifts.append(Shift(user_id=stream.user_id, index=len(shifts), rows=tuple(rows)))
            rows = []
            gap = 0
        rows.append(
            ShiftRow(
                metric_name=event.metric_name,
                pat_id=event.pat_id,
                patient_index=NO_PATIENT_INDEX,
                delta_seconds=float(gap if rows else 0),
            )
        )
        prev_time = event.access_time
    if rows:
        shifts.append(Shift(user_id=stream.user_id, index=len(shifts), rows=tuple(rows)))
    return shifts


def remap_patients(shift: Shift, cap: int = PATIENT_CAP) -> Shift:
    """Replace raw patient ids with per-shift first-appearance indices.

    Absent patients get -1; the cap+1-th and later distinct patients map to
    the shared out-of-vocabulary sentinel.
    """
    mapping: dict[str, int] = {}
    rows: list[ShiftRow] = []
    for row in shift.rows:
        if row.pat_id is None:
            index = NO_PATIENT_INDEX
        else:
            if row.pat_id not in mapping:
                mapping[row.pat_id] = (
                    len(mapping) if len(mapping) < cap else OOV_PATIENT_INDEX
                )
            index = mapping[row.pat_id]
        rows.append(replace(row, patient_index=index))
    return Shift(user_id=shift.user_id, index=shift.index, rows=tuple(rows), patient_map=mapping)


def split_sessions(
    shift: Shift,
    gap_s: int = SESSION_GAP_SECONDS,
    quantizer: QuantizerSpec = DEFAULT_QUANTIZER,
) -> list[Session]:
    """Cut a shift into sessions wherever the raw gap exceeds ``gap_s``.

    Every session's first row is re-zeroed to delta bin 0 so sessions are
    self-contained; remaining deltas are quantized.
    """
    sessions: list[Session] = []
    rows: list[SessionRow] = []

    def close() -> None:
        if rows:
            sessions.append(
                Session(
                    rows=tuple(rows),
                    provenance=SessionKey(shift.user_id, shift.index, len(sessions)),
                )
            )
            rows.clear()

    for row in shift.rows:
        if rows and row.delta_seconds > gap_s:
            close()
        delta = 0.0 if not rows else row.delta_seconds
        rows.append(
            SessionRow(
                metric_name=row.metric_name,
                patient_index=row.patient_index,
                delta_bin=quantize_delta(delta, quantizer),
            )
        )
    close()
    return sessions


def chunk_session(session: Session, max_rows: int) -> list[Session]:
    """Split into consecutive chunks of at most ``max_rows`` rows."""
    if max_rows < 1:
        raise ValueError("max_rows must be >= 1")
    if len(session.rows) <= max_rows:
        return [session]
    chunks: list[Session] = []
    for start in range(0, len(session.rows), max_rows):
        chunks.append(
            Session(
                rows=session.rows[start : start + max_rows],
                provenance=replace(session.provenance, chunk_index=len(chunks)),
            )
        )
    return chunks


def preprocess_stream(
    stream: ClinicianStream,
    *,
    shift_gap_s: int = SHIFT_GAP_SECONDS,
    session_gap_s: int = SESSION_GAP_SECONDS,
    patient_cap: int = PATIENT_CAP,
    quantizer: QuantizerSpec = DEFAULT_QUANTIZER,
    max_rows: int | None = None,
) -> list[Session]:
    """Full segmentation of one clinician stream into (optionally chunked) sessions."""
    sessions: list[Session] = []
    for shift in split_shifts(stream, shift_gap_s):
        remapped = remap_patients(shift, patient_cap)
        for session in split_sessions(remapped, session_gap_s, quantizer):
            if max_rows is None:
                sessions.append(session)
            else:
                sessions.extend(chunk_session(session, max_rows))
    return sessions


def write_session_dump(sessions: Iterable[Session], sink: IO[str]) -> None:
    """Line-delimited session dump.

    Each record is a header line
    ``@session<TAB>user_id<TAB>shift<TAB>session<TAB>chunk<TAB>rows`` followed
    by one ``metric_name<TAB>patient_index<TAB>delta_bin`` line per row.
    """
    for session in sessions:
        key = session.provenance
        sink.write(
            f"@session\t{key.user_id}\t{key.shift_index}\t{key.session_index}"
            f"\t{key.chunk_index}\t{len(session.rows)}\n"
        )
        for row in session.rows:
            sink.write(f"{row.metric_name}\t{row.patient_index}\t{row.delta_bin}\n")


def read_session_dump(lines: Iterable[str]) -> list[Session]:
    """Inverse of :func:`write_session_dump`."""
    sessions: list[Session] = []
    rows: list[SessionRow] = []
    key: SessionKey | None = None
    expected = 0

    def close() -> None:
        nonlocal key
        if key is not None:
            if len(rows) != expected:
                raise ValueError(f"session {key} declared {expected} rows, found {len(rows)}")
            sessions.append(Session(rows=tuple(rows), provenance=key))
            rows.clear()
            key = None

    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("@session\t"):
            close()
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValueError(f"malformed session header: {line!r}")
            key = SessionKey(parts[1], int(parts[2]), int(parts[3]), int(parts[4]))
            expected = int(parts[5])
        else:
            if key is None:
                raise ValueError("row line before any session header")
            name, pat, at = line.rsplit("\t", 2)
            rows.append(SessionRow(name, int(pat), int(at)))
    close()
    return sessions
