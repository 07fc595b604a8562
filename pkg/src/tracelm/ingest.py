"""Parsing and canonical ordering of raw audit-event CSV streams.

The input is a UTF-8 CSV with the header
``USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT``. Events are grouped
per clinician and sorted by ``(access_time, access_instant)`` with ties kept
in input order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import IO, Iterable

AUDIT_COLUMNS = ("USER_ID", "METRIC_NAME", "PAT_ID", "ACCESS_TIME", "ACCESS_INSTANT")


class AuditSchemaError(ValueError):
    """The CSV header does not carry the required columns."""


class AuditRowError(ValueError):
    """A data row is malformed; carries its 1-based line number."""

    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class RawAuditEvent:
    """One audit-log row: who did what to whom, and when."""

    user_id: str
    metric_name: str
    pat_id: str | None
    access_time: int
    access_instant: int

    def __post_init__(self) -> None:
        if not self.metric_name:
            raise ValueError("metric_name must be non-empty")
        if self.access_time < 0 or self.access_instant < 0:
            raise ValueError("access_time and access_instant must be >= 0")


@dataclass(frozen=True)
class ClinicianStream:
    """All events of one clinician, ordered by (access_time, access_instant)."""

    user_id: str
    events: tuple[RawAuditEvent, ...]


def parse_access_time(text: str, line_number: int = 0) -> int:
    """Convert an ACCESS_TIME cell to epoch seconds.

    Accepts plain integer epoch seconds or an ISO-8601 datetime (naive values
    are treated as UTC).
    """
    raw = text.strip()
    if not raw:
        raise AuditRowError(line_number, "ACCESS_TIME is empty")
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        moment = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError:
        raise AuditRowError(
            line_number,
            f"ACCESS_TIME {raw!r} is neither epoch seconds nor ISO-8601",
        ) from None
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return int(moment.timestamp())


def _open_text(source: bytes | str | IO[str] | IO[bytes]) -> IO[str]:
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, str):
        return io.StringIO(source)
    if isinstance(source, io.TextIOBase):
        return source
    raw = source.read()
    if isinstance(raw, bytes):
        return io.StringIO(raw.decode("utf-8"))
    return io.StringIO(raw)


def parse_audit_csv(source: bytes | str | IO[str] | IO[bytes]) -> list[ClinicianStream]:
    """Parse raw audit CSV into one sorted stream per clinician.

    Streams are returned in order of first appearance of each USER_ID. An
    empty PAT_ID cell means the event touched no patient. Duplicate identical
    rows are kept.
    """
    reader = csv.reader(_open_text(source))
    try:
        header = next(reader)
    except StopIteration:
        raise AuditSchemaError("input is empty; expected a header row") from None
    positions: dict[str, int] = {}
    for idx, name in enumerate(header):
        positions.setdefault(name.strip(), idx)
    for column in AUDIT_COLUMNS:
        if column not in positions:
            raise AuditSchemaError(f"missing required column {column}")

    by_user: dict[str, list[RawAuditEvent]] = {}
    for line_number, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) < len(header):
            raise AuditRowError(line_number, f"expected {len(header)} cells, got {len(row)}")
        user_id = row[positions["USER_ID"]].strip()
        if not user_id:
            raise AuditRowError(line_number, "USER_ID is empty")
        metric_name = row[positions["METRIC_NAME"]]
        if not metric_name:
            raise AuditRowError(line_number, "METRIC_NAME is empty")
        pat_cell = row[positions["PAT_ID"]].strip()
        access_time = parse_access_time(row[positions["ACCESS_TIME"]], line_number)
        instant_cell = row[positions["ACCESS_INSTANT"]].strip()
        try:
            access_instant = int(instant_cell)
        except ValueError:
            raise AuditRowError(
                line_number, f"ACCESS_INSTANT {instant_cell!r} is not an integer"
            ) from None
        if access_time < 0 or access_instant < 0:
            raise AuditRowError(line_number, "timestamps must be >= 0")
        event = RawAuditEvent(
            user_id=user_id,
            metric_name=metric_name,
            pat_id=pat_cell or None,
            access_time=access_time,
            access_instant=access_instant,
        )
        by_user.setdefault(user_id, []).append(event)

    return [
        sort_events(ClinicianStream(user_id=user, events=tuple(events)))
        for user, events in by_user.items()
    ]


def sort_events(stream: ClinicianStream) -> ClinicianStream:
    """Stable sort of a stream by (access_time, access_instant)."""
    ordered = sorted(stream.events, key=lambda e: (e.access_time, e.access_instant))
    return replace(stream, events=tuple(ordered))


def write_audit_csv(streams: Iterable[ClinicianStream], sink: IO[str]) -> None:
    """Serialize streams back to the canonical CSV layout."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(AUDIT_COLUMNS)
    for stream in streams:
        for event in stream.events:
            writer.writerow(
                (
                    event.user_id,
                    event.metric_name,
                    event.pat_id or "",
                    event.access_time,
                    event.access_instant,
                )
            )


def audit_csv_text(streams: Iterable[ClinicianStream]) -> str:
    """Render streams as a CSV string."""
    buffer = io.StringIO()
    write_audit_csv(streams, buffer)
    return buffer.getvalue()
